//! Deep neural mixture model: a convex combination of normalized network
//! outputs, trained by stochastic gradient ascent on the point-wise
//! likelihood with a soft unit-integral penalty on every component.
//!
//! Mixing coefficients are never stored directly. They are derived from
//! unconstrained latent values `γ_k` as `ς(γ_k) / Σ_l ς(γ_l)`, so every
//! update keeps them on the simplex.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DnmmError, Result};
use crate::integrate::{
    sample_integration_points, AnnealSchedule, BatchOptions, DomainBox, EstimatorMode, IntegrationBatch,
    ProposalConfig, SamplerNormalizer,
};
use crate::neural::{logistic, Architecture, DeepNet, InitConfig, Scratch};

/// Normalizers below this value make a component degenerate.
pub const NORMALIZER_FLOOR: f64 = 1e-8;

/// Consecutive degenerate epochs tolerated before training aborts.
const DEGENERATE_PATIENCE: usize = 3;

const FORMAT_VERSION: u32 = 1;

/// `c_k = ς(γ_k) / Σ_l ς(γ_l)`.
pub fn mixing_coefficients(gammas: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = gammas.iter().map(|&g| logistic(g)).collect();
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

/// Estimated `∫_S φ_k` and `∫_S ∂φ_k/∂w` for every parameter of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentIntegrals {
    pub normalizer: f64,
    pub gradient: Vec<f64>,
}

impl ComponentIntegrals {
    /// One forward and one backward pass per batch point.
    pub fn from_batch(net: &DeepNet, batch: &IntegrationBatch) -> Result<Self> {
        let weights = batch.weights()?;
        let mut scratch = net.scratch();
        Ok(accumulate(net, batch.points(), &weights, &mut scratch))
    }
}

fn accumulate(net: &DeepNet, points: &[Vec<f64>], weights: &[f64], scratch: &mut Scratch) -> ComponentIntegrals {
    let n = net.param_count();
    let mut gradient = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut normalizer = 0.0;
    for (p, w) in points.iter().zip(weights) {
        let v = net.value_and_gradient(p, scratch, &mut grad);
        normalizer += w * v;
        for (acc, g) in gradient.iter_mut().zip(&grad) {
            *acc += w * g;
        }
    }
    ComponentIntegrals { normalizer, gradient }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dnmm {
    components: Vec<DeepNet>,
    gammas: Vec<f64>,
    normalizers: Vec<f64>,
    domain: DomainBox,
}

impl Dnmm {
    pub fn from_parts(
        components: Vec<DeepNet>,
        gammas: Vec<f64>,
        normalizers: Vec<f64>,
        domain: DomainBox,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(DnmmError::Input("a mixture needs at least one component".into()));
        }
        check_dim(components.len(), gammas.len())?;
        check_dim(components.len(), normalizers.len())?;
        for net in &components {
            check_dim(domain.dim(), net.input_dim())?;
        }
        if let Some(z) = normalizers.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
            return Err(DnmmError::Input(format!("normalizers must be positive, got {z}")));
        }
        Ok(Self {
            components,
            gammas,
            normalizers,
            domain,
        })
    }

    /// `k` random components with equal mixing coefficients. Normalizers are
    /// initialized by plain Monte Carlo with `init_points` uniform points.
    pub fn new<R: Rng + ?Sized>(
        domain: DomainBox,
        k: usize,
        arch: &Architecture,
        init: InitConfig,
        init_points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(DnmmError::Input("a mixture needs at least one component".into()));
        }
        let components = (0..k)
            .map(|_| DeepNet::new(domain.dim(), arch, init, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            components,
            gammas: vec![0.0; k],
            normalizers: vec![1.0; k],
            domain,
        };
        model.refresh_normalizers_uniform(init_points.max(1), rng)?;
        Ok(model)
    }

    /// Re-estimates every normalizer by uniform Monte Carlo.
    pub fn refresh_normalizers_uniform<R: Rng + ?Sized>(&mut self, points: usize, rng: &mut R) -> Result<()> {
        let pts: Vec<Vec<f64>> = (0..points).map(|_| self.domain.sample_uniform(rng)).collect();
        let batch = IntegrationBatch::new(pts, &self.domain, EstimatorMode::PlainAverage, None)?;
        for (k, net) in self.components.iter().enumerate() {
            let mut scratch = net.scratch();
            let sum: f64 = batch.points().iter().map(|p| net.forward_with(p, &mut scratch)).sum();
            self.normalizers[k] = (sum * self.domain.volume() / points as f64).max(f64::MIN_POSITIVE);
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn components(&self) -> &[DeepNet] {
        &self.components
    }

    pub fn component_mut(&mut self, k: usize) -> &mut DeepNet {
        &mut self.components[k]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn set_gammas(&mut self, gammas: Vec<f64>) -> Result<()> {
        check_dim(self.k(), gammas.len())?;
        self.gammas = gammas;
        Ok(())
    }

    pub fn normalizers(&self) -> &[f64] {
        &self.normalizers
    }

    pub fn set_normalizer(&mut self, k: usize, z: f64) -> Result<()> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(DnmmError::Input(format!("normalizer must be positive, got {z}")));
        }
        self.normalizers[k] = z;
        Ok(())
    }

    pub fn mixing(&self) -> Vec<f64> {
        mixing_coefficients(&self.gammas)
    }

    pub fn param_count(&self) -> usize {
        self.components.iter().map(DeepNet::param_count).sum::<usize>() + self.k()
    }

    fn normalizer(&self, k: usize) -> Result<f64> {
        let z = self.normalizers[k];
        if z < NORMALIZER_FLOOR {
            Err(DnmmError::DegenerateComponent {
                component: k,
                normalizer: z,
            })
        } else {
            Ok(z)
        }
    }

    /// `φ_k(x) / Z_k`; zero outside the domain.
    pub fn component_density(&self, k: usize, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        if k >= self.k() {
            return Err(DnmmError::Input(format!("no component {k}")));
        }
        let z = self.normalizer(k)?;
        if !self.domain.contains(x) {
            return Ok(0.0);
        }
        Ok(self.components[k].forward(x)? / z)
    }

    pub fn mixture_density(&self, x: &[f64]) -> Result<f64> {
        let c = self.mixing();
        let mut total = 0.0;
        for (k, ck) in c.iter().enumerate() {
            total += ck * self.component_density(k, x)?;
        }
        Ok(total)
    }

    /// Batch evaluation of the mixture density, reusing buffers.
    pub fn mixture_density_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let c = self.mixing();
        let z: Vec<f64> = (0..self.k()).map(|k| self.normalizer(k)).collect::<Result<_>>()?;
        let mut scratches: Vec<Scratch> = self.components.iter().map(DeepNet::scratch).collect();
        xs.iter()
            .map(|x| {
                check_dim(self.dim(), x.len())?;
                if !self.domain.contains(x) {
                    return Ok(0.0);
                }
                Ok(self
                    .components
                    .iter()
                    .zip(scratches.iter_mut())
                    .enumerate()
                    .map(|(k, (net, s))| c[k] * net.forward_with(x, s) / z[k])
                    .sum())
            })
            .collect()
    }

    /// `C(W, x) = p̃(x) − ρ Σ_k ½ (1 − Z_k)²` with the cached normalizers.
    pub fn loss(&self, x: &[f64], rho: f64) -> Result<f64> {
        let penalty: f64 = self.normalizers.iter().map(|z| 0.5 * (1.0 - z).powi(2)).sum();
        Ok(self.mixture_density(x)? - rho * penalty)
    }

    /// `Δγ_k = η ς'(γ_k)/Σ_l ς(γ_l) · (p̃_k(x) − p̃(x))`.
    pub fn gamma_update(&self, x: &[f64], eta: f64) -> Result<Vec<f64>> {
        let densities = (0..self.k())
            .map(|k| self.component_density(k, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(gamma_deltas(&self.gammas, &densities, eta))
    }

    /// Parameter deltas for component `k` at pattern `x`, given the
    /// component's batch integrals:
    /// `η [ c_k/Z (∂φ(x) − φ(x)/Z · G) + ρ (1 − Z) G ]`.
    pub fn component_param_update(
        &self,
        k: usize,
        x: &[f64],
        integrals: &ComponentIntegrals,
        eta: f64,
        rho: f64,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let net = &self.components[k];
        check_dim(net.param_count(), integrals.gradient.len())?;
        if integrals.normalizer < NORMALIZER_FLOOR {
            return Err(DnmmError::DegenerateComponent {
                component: k,
                normalizer: integrals.normalizer,
            });
        }
        let mut scratch = net.scratch();
        let mut grad = vec![0.0; net.param_count()];
        let phi = net.value_and_gradient(x, &mut scratch, &mut grad);
        let c = self.mixing()[k];
        write_param_deltas(&mut grad, phi, c, integrals, eta, rho);
        Ok(grad)
    }

    /// Trains the model in place and returns the per-epoch trace.
    pub fn train(&mut self, data: &[Vec<f64>], config: &TrainConfig) -> Result<Trace> {
        self.train_observed(data, config, |_| {})
    }

    /// Like [`Dnmm::train`], calling `observer` after every pattern update.
    pub fn train_observed<F: FnMut(&Dnmm)>(
        &mut self,
        data: &[Vec<f64>],
        config: &TrainConfig,
        mut observer: F,
    ) -> Result<Trace> {
        config.validate()?;
        if data.is_empty() {
            return Err(DnmmError::Input("training data is empty".into()));
        }
        for x in data {
            check_dim(self.dim(), x.len())?;
            if !self.domain.contains(x) {
                return Err(DnmmError::Input(format!(
                    "training point {x:?} lies outside the domain"
                )));
            }
        }

        let schedule = AnnealSchedule::new(config.theta, config.epochs)?;
        let options = BatchOptions {
            mode: config.mode,
            normalizer: config.sampler_normalizer,
            min_alpha: config.min_alpha,
        };
        let k_count = self.k();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut degenerate_run = vec![0usize; k_count];
        let mut scratches: Vec<Scratch> = self.components.iter().map(DeepNet::scratch).collect();
        let mut grads: Vec<Vec<f64>> = self.components.iter().map(|n| vec![0.0; n.param_count()]).collect();
        let mut phis = vec![0.0; k_count];
        let mut densities = vec![0.0; k_count];
        let mut trace = Trace::default();

        for t in 1..=config.epochs {
            let eta = config.eta * config.eta_decay.powi(t as i32 - 1);

            // (a) fresh batches, (b) integrals at the current parameters
            let mut batches = Vec::with_capacity(k_count);
            let mut weights = Vec::with_capacity(k_count);
            for k in 0..k_count {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, t as u64, k as u64));
                let net = &self.components[k];
                let scratch = &mut scratches[k];
                let mut f = |x: &[f64]| net.forward_with(x, scratch);
                let previous = if t == 1 { None } else { Some(self.normalizers[k]) };
                let batch = sample_integration_points(
                    &mut f,
                    &self.domain,
                    t,
                    &schedule,
                    config.m,
                    config.proposal,
                    options,
                    previous,
                    &mut rng,
                )
                .map_err(|e| match e {
                    // a component that vanished everywhere cannot seed its chain
                    DnmmError::ZeroStart | DnmmError::DegenerateSampler(_) => {
                        DnmmError::TrainingFailure { component: k, epoch: t }
                    }
                    other => other,
                })?;
                weights.push(batch.weights()?);
                batches.push(batch);
            }
            let mut integrals = self.refresh(&batches, &weights, &mut scratches);
            for k in 0..k_count {
                if integrals[k].normalizer < NORMALIZER_FLOOR {
                    degenerate_run[k] += 1;
                    if degenerate_run[k] >= DEGENERATE_PATIENCE {
                        return Err(DnmmError::TrainingFailure { component: k, epoch: t });
                    }
                } else {
                    degenerate_run[k] = 0;
                }
            }

            // (c) one pass over the shuffled patterns
            order.shuffle(&mut shuffle_rng);
            for (step, &j) in order.iter().enumerate() {
                if step > 0 && config.refresh_period.is_some_and(|p| p > 0 && step % p == 0) {
                    integrals = self.refresh(&batches, &weights, &mut scratches);
                }
                let x = &data[j];
                let c = self.mixing();
                for k in 0..k_count {
                    phis[k] = self.components[k].value_and_gradient(x, &mut scratches[k], &mut grads[k]);
                    let z = integrals[k].normalizer;
                    densities[k] = if z >= NORMALIZER_FLOOR { phis[k] / z } else { 0.0 };
                }
                let d_gamma = gamma_deltas(&self.gammas, &densities, eta);
                for k in 0..k_count {
                    if integrals[k].normalizer < NORMALIZER_FLOOR {
                        continue;
                    }
                    write_param_deltas(&mut grads[k], phis[k], c[k], &integrals[k], eta, config.rho);
                    self.components[k].apply_delta(&grads[k])?;
                    if config.track_normalizers {
                        let dz: f64 = integrals[k].gradient.iter().zip(&grads[k]).map(|(g, d)| g * d).sum();
                        integrals[k].normalizer += dz;
                    }
                }
                for (g, d) in self.gammas.iter_mut().zip(&d_gamma) {
                    *g += d;
                }
                observer(self);
            }
            if t == config.epochs && config.final_normalizer_points > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, t as u64 + 1, k_count as u64));
                self.refresh_normalizers_uniform(config.final_normalizer_points, &mut rng)?;
                if let Some(k) = self.normalizers.iter().position(|&z| z < NORMALIZER_FLOOR) {
                    return Err(DnmmError::TrainingFailure { component: k, epoch: t });
                }
                let ll = self.mean_log_likelihood_with(data, &mut scratches);
                trace.epochs.push(EpochRecord {
                    epoch: t,
                    mean_log_likelihood: ll,
                    normalizers: self.normalizers.clone(),
                    mixing: self.mixing(),
                });
                break;
            }

            // cached normalizers follow the end-of-epoch parameters
            integrals = self.refresh(&batches, &weights, &mut scratches);
            for (k, ints) in integrals.iter().enumerate() {
                self.normalizers[k] = ints.normalizer.max(f64::MIN_POSITIVE);
            }

            let ll = self.mean_log_likelihood_with(data, &mut scratches);
            trace.epochs.push(EpochRecord {
                epoch: t,
                mean_log_likelihood: ll,
                normalizers: self.normalizers.clone(),
                mixing: self.mixing(),
            });
        }
        Ok(trace)
    }

    fn refresh(
        &self,
        batches: &[IntegrationBatch],
        weights: &[Vec<f64>],
        scratches: &mut [Scratch],
    ) -> Vec<ComponentIntegrals> {
        self.components
            .iter()
            .zip(batches.iter().zip(weights))
            .zip(scratches.iter_mut())
            .map(|((net, (batch, w)), s)| accumulate(net, batch.points(), w, s))
            .collect()
    }

    fn mean_log_likelihood_with(&self, data: &[Vec<f64>], scratches: &mut [Scratch]) -> f64 {
        let c = self.mixing();
        let total: f64 = data
            .iter()
            .map(|x| {
                let p: f64 = self
                    .components
                    .iter()
                    .zip(scratches.iter_mut())
                    .enumerate()
                    .map(|(k, (net, s))| c[k] * net.forward_with(x, s) / self.normalizers[k])
                    .sum();
                p.max(1e-300).ln()
            })
            .sum();
        total / data.len() as f64
    }

    pub fn to_json(&self, config: Option<&TrainConfig>) -> Result<String> {
        let doc = ModelDocument {
            format_version: FORMAT_VERSION,
            k: self.k(),
            gammas: self.gammas.clone(),
            normalizers: self.normalizers.clone(),
            domain: self.domain.clone(),
            components: self.components.clone(),
            train_config: config.cloned(),
            seed: config.map(|c| c.seed),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<TrainConfig>)> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(DnmmError::Input(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        check_dim(doc.k, doc.components.len())?;
        let model = Self::from_parts(doc.components, doc.gammas, doc.normalizers, doc.domain)?;
        Ok((model, doc.train_config))
    }
}

fn gamma_deltas(gammas: &[f64], densities: &[f64], eta: f64) -> Vec<f64> {
    let s: Vec<f64> = gammas.iter().map(|&g| logistic(g)).collect();
    let total: f64 = s.iter().sum();
    let mixture: f64 = s.iter().zip(densities).map(|(si, p)| si / total * p).sum();
    s.iter()
        .zip(densities)
        .map(|(si, p)| eta * si * (1.0 - si) / total * (p - mixture))
        .collect()
}

// Turns `grad = ∂φ(x)/∂w` into the parameter deltas in place.
fn write_param_deltas(grad: &mut [f64], phi: f64, c: f64, integrals: &ComponentIntegrals, eta: f64, rho: f64) {
    let z = integrals.normalizer;
    let credit = c / z;
    let density = phi / z;
    let penalty = rho * (1.0 - z);
    for (g, gi) in grad.iter_mut().zip(&integrals.gradient) {
        *g = eta * (credit * (*g - density * gi) + penalty * gi);
    }
}

fn stream_seed(seed: u64, epoch: u64, component: u64) -> u64 {
    // splitmix64 over the triple
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(component.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eta: f64,
    pub rho: f64,
    pub epochs: usize,
    /// Integration points per component and epoch.
    pub m: usize,
    pub theta: f64,
    pub proposal: ProposalConfig,
    pub seed: u64,
    /// Recompute batch integrals every this many patterns; `None` means once per epoch.
    pub refresh_period: Option<usize>,
    pub mode: EstimatorMode,
    pub sampler_normalizer: SamplerNormalizer,
    /// Lower bound on the uniform share of the sampling mixture.
    pub min_alpha: f64,
    /// Multiplicative learning-rate decay per epoch; 1 disables it.
    pub eta_decay: f64,
    /// Between refreshes, move each normalizer by its first-order change `G · Δw`.
    pub track_normalizers: bool,
    /// Uniform points per component for the normalizers stored after the last
    /// epoch; 0 keeps the last batch estimate.
    pub final_normalizer_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            rho: 1.0,
            epochs: 100,
            m: 400,
            theta: 0.07,
            proposal: ProposalConfig::default(),
            seed: 0,
            refresh_period: None,
            mode: EstimatorMode::ImportanceWeighted,
            sampler_normalizer: SamplerNormalizer::Lagged,
            min_alpha: 0.2,
            eta_decay: 1.0,
            track_normalizers: true,
            final_normalizer_points: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(DnmmError::Input(format!(
                "learning rate must be positive, got {}",
                self.eta
            )));
        }
        if !(self.rho >= 0.0) {
            return Err(DnmmError::Input(format!(
                "penalty weight must be nonnegative, got {}",
                self.rho
            )));
        }
        if self.epochs == 0 || self.m == 0 {
            return Err(DnmmError::Input("epochs and m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_alpha) {
            return Err(DnmmError::Input(format!(
                "min_alpha must lie in [0, 1], got {}",
                self.min_alpha
            )));
        }
        if !(self.eta_decay > 0.0) {
            return Err(DnmmError::Input("eta decay must be positive".into()));
        }
        AnnealSchedule::new(self.theta, self.epochs)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_log_likelihood: f64,
    pub normalizers: Vec<f64>,
    pub mixing: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub epochs: Vec<EpochRecord>,
}

impl Trace {
    /// `epoch,mean_log_likelihood,Z_1..Z_K,c_1..c_K`
    pub fn to_csv(&self) -> String {
        let k = self.epochs.first().map_or(0, |e| e.normalizers.len());
        let mut out = String::from("epoch,mean_log_likelihood");
        for i in 1..=k {
            out.push_str(&format!(",Z_{i}"));
        }
        for i in 1..=k {
            out.push_str(&format!(",c_{i}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{:e}", e.epoch, e.mean_log_likelihood));
            for v in e.normalizers.iter().chain(&e.mixing) {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    k: usize,
    gammas: Vec<f64>,
    normalizers: Vec<f64>,
    domain: DomainBox,
    components: Vec<DeepNet>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Evaluation errors (degenerate normalizers) surface as NaN.
impl crate::eval::Density for Dnmm {
    fn dim(&self) -> usize {
        Dnmm::dim(self)
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.mixture_density(x).unwrap_or(f64::NAN)
    }
}
