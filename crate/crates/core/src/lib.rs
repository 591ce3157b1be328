//! Deep neural mixture models for nonparametric density estimation.
//!
//! A [`Dnmm`] is a convex mixture of components, each the normalized output
//! of a small feed-forward network on a compact box `S`. Training maximizes
//! the point-wise likelihood of the data under a soft unit-integral penalty,
//! with the integrals estimated by annealed importance sampling
//! ([`integrate`]). The crate also ships the classical estimators used as
//! baselines ([`baselines`]), synthetic ground-truth targets ([`synth`]),
//! scoring ([`eval`]) and likelihood-driven model selection ([`select`]).

pub mod baselines;
pub mod error;
pub mod eval;
pub mod integrate;
pub mod mixture;
pub mod neural;
pub mod select;
pub mod synth;

pub use baselines::{Baseline, Gmm, KnnModel, ParzenModel};
pub use error::{DnmmError, Result};
pub use eval::Density;
pub use integrate::{AnnealSchedule, DomainBox, EstimatorMode, IntegrationBatch, ProposalConfig};
pub use mixture::{mixing_coefficients, Dnmm, Trace, TrainConfig};
pub use neural::{Activation, Architecture, DeepNet, InitConfig, ParamGradient};
