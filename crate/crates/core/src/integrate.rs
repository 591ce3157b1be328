//! Monte Carlo integration over a compact box.
//!
//! Integration points for a component are drawn from the annealed mixture
//! `α(t)·u(x) + (1 − α(t))·p̃(x)`, where `u` is uniform on the box and `p̃`
//! is the normalized component, sampled with a Metropolis-Hastings chain
//! driven by a logistic random-walk proposal. One batch of points serves the
//! integral of the component function and the integrals of all its
//! parameter derivatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DnmmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(DnmmError::Input("domain box needs at least one dimension".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DnmmError::Input(format!("invalid domain interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^d`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    /// Each side grown by `fraction` of its length on both ends.
    pub fn padded(&self, fraction: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                let pad = (hi - lo) * fraction;
                (lo - pad, hi + pad)
            })
            .unzip();
        Self { lower, upper }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub theta: f64,
    pub total_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(theta: f64, total_epochs: usize) -> Result<Self> {
        if !(theta > 0.0) || total_epochs == 0 {
            return Err(DnmmError::Input(format!(
                "anneal schedule needs theta > 0 and T >= 1 (got {theta}, {total_epochs})"
            )));
        }
        Ok(Self { theta, total_epochs })
    }

    /// Uniform share of the sampling mixture at epoch `t` (1-based).
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_epochs {
            return Err(DnmmError::Input(format!("epoch {t} outside 1..={}", self.total_epochs)));
        }
        let z = (t as f64 / self.total_epochs as f64 - 0.5) / self.theta;
        Ok(1.0 / (1.0 + z.exp()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub sigma: f64,
    pub burn_in: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            sigma: 9.0,
            burn_in: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// `V(S)/m · Σ f(x_ℓ)` regardless of how the points were drawn.
    PlainAverage,
    /// `1/m · Σ f(x_ℓ)/q(x_ℓ)` with `q` the recorded sampling density.
    ImportanceWeighted,
}

/// Where the normalizer of the chain's stationary law comes from when the
/// sampling density of a batch is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerNormalizer {
    /// The previous epoch's cached normalizer.
    Lagged,
    /// Solved from the batch itself: the unique `Z` for which the
    /// importance-weighted integral of the component equals `Z`.
    SelfConsistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationBatch {
    points: Vec<Vec<f64>>,
    mode: EstimatorMode,
    volume: f64,
    sample_pdf: Option<Vec<f64>>,
    from_uniform: Vec<bool>,
    alpha: f64,
}

impl IntegrationBatch {
    /// Builds a batch from explicit points; `sample_pdf` is required in
    /// importance-weighted mode and must match the point count.
    pub fn new(
        points: Vec<Vec<f64>>,
        domain: &DomainBox,
        mode: EstimatorMode,
        sample_pdf: Option<Vec<f64>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(DnmmError::Input("integration batch needs at least one point".into()));
        }
        if let Some(p) = points.iter().find(|p| !domain.contains(p)) {
            return Err(DnmmError::Input(format!("integration point {p:?} outside the domain")));
        }
        match (&sample_pdf, mode) {
            (None, EstimatorMode::ImportanceWeighted) => {
                return Err(DnmmError::Input(
                    "importance-weighted batch needs sampling densities".into(),
                ))
            }
            (Some(q), _) => check_dim(points.len(), q.len())?,
            _ => {}
        }
        let m = points.len();
        Ok(Self {
            points,
            mode,
            volume: domain.volume(),
            sample_pdf,
            from_uniform: vec![true; m],
            alpha: 1.0,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn sample_pdf(&self) -> Option<&[f64]> {
        self.sample_pdf.as_deref()
    }

    /// Whether each point came from the uniform side of the mixture.
    pub fn from_uniform(&self) -> &[bool] {
        &self.from_uniform
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per-point weights `w_ℓ` such that the integral estimate is `Σ w_ℓ f(x_ℓ)`.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let m = self.points.len() as f64;
        match self.mode {
            EstimatorMode::PlainAverage => Ok(vec![self.volume / m; self.points.len()]),
            EstimatorMode::ImportanceWeighted => {
                let q = self.sample_pdf.as_ref().expect("checked at construction");
                q.iter()
                    .map(|&q| {
                        if q > 0.0 && q.is_finite() {
                            Ok(1.0 / (m * q))
                        } else {
                            Err(DnmmError::DegenerateSampler(q))
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Integral estimate from per-point values of the integrand.
pub fn estimate_integral(values: &[f64], batch: &IntegrationBatch) -> Result<f64> {
    check_dim(batch.len(), values.len())?;
    let w = batch.weights()?;
    Ok(values.iter().zip(&w).map(|(v, w)| v * w).sum())
}

/// Draw from the logistic proposal centred at `x`.
pub fn sample_proposal<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let u = open_unit(rng);
            xi + sigma * (u / (1.0 - u)).ln()
        })
        .collect()
}

/// `q(x' | x, σ)`: product of logistic densities with location `x_i` and scale `σ`.
pub fn proposal_density(to: &[f64], from: &[f64], sigma: f64) -> f64 {
    to.iter()
        .zip(from)
        .map(|(a, b)| {
            // e^z / (1 + e^z)^2 is even in z; evaluate with |z| to avoid overflow
            let z = ((a - b) / sigma).abs();
            let e = (-z).exp();
            e / (sigma * (1.0 + e) * (1.0 + e))
        })
        .product()
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn checked_target<F: FnMut(&[f64]) -> f64 + ?Sized>(target: &mut F, x: &[f64]) -> Result<f64> {
    let v = target(x);
    if v < 0.0 || v.is_nan() {
        Err(DnmmError::NegativeTarget(v))
    } else {
        Ok(v)
    }
}

/// Runs a Metropolis-Hastings chain restricted to `domain` and returns the
/// `count` states that follow the burn-in.
///
/// Proposals that leave the box are rejected. The proposal is symmetric, so
/// a move is accepted with probability `min(1, target(x')/target(x))`.
pub fn metropolis_hastings<F, R>(
    target: &mut F,
    domain: &DomainBox,
    start: &[f64],
    config: ProposalConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    Ok(metropolis_hastings_with_values(target, domain, start, config, count, rng)?.0)
}

/// Same chain as [`metropolis_hastings`], also returning the target value at each state.
pub fn metropolis_hastings_with_values<F, R>(
    target: &mut F,
    domain: &DomainBox,
    start: &[f64],
    config: ProposalConfig,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    check_dim(domain.dim(), start.len())?;
    if !(config.sigma > 0.0) {
        return Err(DnmmError::Input(format!(
            "proposal scale must be positive, got {}",
            config.sigma
        )));
    }
    if !domain.contains(start) {
        return Err(DnmmError::Input("chain start lies outside the domain".into()));
    }
    let mut current = start.to_vec();
    let mut current_value = checked_target(target, &current)?;
    if current_value == 0.0 {
        return Err(DnmmError::ZeroStart);
    }
    let mut states = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for step in 0..config.burn_in + count {
        let proposal = sample_proposal(&current, config.sigma, rng);
        if domain.contains(&proposal) {
            let value = checked_target(target, &proposal)?;
            if accepts(current_value, value, rng.random()) {
                current = proposal;
                current_value = value;
            }
        }
        if step >= config.burn_in {
            states.push(current.clone());
            values.push(current_value);
        }
    }
    Ok((states, values))
}

#[inline]
fn accepts(current: f64, proposed: f64, u: f64) -> bool {
    proposed >= current || u * current < proposed
}

/// Options that decide how the sampling density of a batch is recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub mode: EstimatorMode,
    pub normalizer: SamplerNormalizer,
    /// Lower bound on the uniform share of the sampling mixture.
    pub min_alpha: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::ImportanceWeighted,
            normalizer: SamplerNormalizer::Lagged,
            min_alpha: 0.2,
        }
    }
}

const MAX_START_TRIES: usize = 1000;

/// Draws `m` integration points for one component at epoch `t`.
///
/// Each point independently comes from the uniform law on `domain` with
/// probability `α(t)` and from a Metropolis-Hastings chain on
/// `component_fn` otherwise. With `previous_normalizer = None` and the
/// lagged normalizer, the batch is drawn purely uniformly.
#[allow(clippy::too_many_arguments)]
pub fn sample_integration_points<F, R>(
    component_fn: &mut F,
    domain: &DomainBox,
    t: usize,
    schedule: &AnnealSchedule,
    m: usize,
    config: ProposalConfig,
    options: BatchOptions,
    previous_normalizer: Option<f64>,
    rng: &mut R,
) -> Result<IntegrationBatch>
where
    F: FnMut(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    if m == 0 {
        return Err(DnmmError::Input("integration batch needs m >= 1".into()));
    }
    let mut alpha = schedule.alpha(t)?.max(options.min_alpha.clamp(0.0, 1.0));
    if previous_normalizer.is_none() && options.normalizer == SamplerNormalizer::Lagged {
        alpha = 1.0;
    }

    let from_uniform: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < alpha).collect();
    let chain_len = from_uniform.iter().filter(|u| !**u).count();

    let (chain, chain_values) = if chain_len > 0 {
        let mut tries = 0;
        loop {
            let start = domain.sample_uniform(rng);
            match metropolis_hastings_with_values(component_fn, domain, &start, config, chain_len, rng) {
                Err(DnmmError::ZeroStart) if tries < MAX_START_TRIES => tries += 1,
                other => break other?,
            }
        }
    } else {
        (Vec::new(), Vec::new())
    };

    let mut points = Vec::with_capacity(m);
    let mut values = Vec::with_capacity(m);
    let mut chain_iter = chain.into_iter().zip(chain_values);
    for &uniform in &from_uniform {
        if uniform {
            let p = domain.sample_uniform(rng);
            values.push(checked_target(component_fn, &p)?);
            points.push(p);
        } else {
            let (p, v) = chain_iter.next().expect("chain length matches");
            points.push(p);
            values.push(v);
        }
    }

    let volume = domain.volume();
    let sample_pdf = match options.mode {
        EstimatorMode::PlainAverage => None,
        EstimatorMode::ImportanceWeighted => {
            let z = match options.normalizer {
                SamplerNormalizer::Lagged => previous_normalizer,
                SamplerNormalizer::SelfConsistent => {
                    solve_mixture_normalizer(&values, alpha, volume).or(previous_normalizer)
                }
            };
            Some(match z {
                Some(z) if alpha < 1.0 => values.iter().map(|v| alpha / volume + (1.0 - alpha) * v / z).collect(),
                _ => vec![1.0 / volume; m],
            })
        }
    };

    Ok(IntegrationBatch {
        points,
        mode: options.mode,
        volume,
        sample_pdf,
        from_uniform,
        alpha,
    })
}

/// Solves `mean_ℓ f_ℓ / (α Z/V + (1 − α) f_ℓ) = 1` for `Z > 0`.
///
/// The left side decreases strictly in `Z`, so the root is unique whenever
/// `0 < α < 1` and some value is positive. Returns `None` otherwise.
pub fn solve_mixture_normalizer(values: &[f64], alpha: f64, volume: f64) -> Option<f64> {
    if !(alpha > 0.0 && alpha < 1.0) || values.iter().all(|v| *v <= 0.0) {
        return None;
    }
    let m = values.len() as f64;
    let h = |log_z: f64| {
        let scaled = alpha * log_z.exp() / volume;
        values.iter().map(|f| f / (scaled + (1.0 - alpha) * f)).sum::<f64>() / m - 1.0
    };
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    while h(lo) < 0.0 {
        lo -= 10.0;
        if lo < -700.0 {
            return None;
        }
    }
    while h(hi) > 0.0 {
        hi += 10.0;
        if hi > 700.0 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Some((0.5 * (lo + hi)).exp())
}
