use thiserror::Error;

/// Errors produced by the estimators, samplers and evaluation routines.
#[derive(Debug, Error)]
pub enum DnmmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("Metropolis-Hastings start point has zero target density")]
    ZeroStart,

    #[error("target function returned a negative value ({0})")]
    NegativeTarget(f64),

    #[error("degenerate sampler: recorded sampling density {0} is not positive")]
    DegenerateSampler(f64),

    #[error("component {component} is degenerate: normalizer {normalizer:e} below floor")]
    DegenerateComponent { component: usize, normalizer: f64 },

    #[error("training failed at epoch {epoch}: component {component} stayed degenerate")]
    TrainingFailure { component: usize, epoch: usize },

    #[error("grid of {size} components exceeds the cap of {cap}")]
    TooLarge { size: u128, cap: usize },

    #[error("search failed: every candidate failed to train")]
    SearchFailed,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DnmmError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DnmmError::Dimension { expected, got })
    }
}
