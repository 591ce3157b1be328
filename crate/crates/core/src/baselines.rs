//! Classical density estimators: Gaussian mixtures fitted by EM from a
//! k-means start, Parzen windows and k_n-nearest-neighbor estimates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DnmmError, Result};
use crate::eval::Density;

/// Smallest eigenvalue (or variance) any fitted covariance may have.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Radius used in place of a zero nearest-neighbor distance.
pub const KNN_RADIUS_FLOOR: f64 = 1e-6;

/// Dimension above which covariances are diagonal.
pub const FULL_COVARIANCE_MAX_DIM: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sample(data: &[Vec<f64>]) -> Result<usize> {
    let first = data.first().ok_or_else(|| DnmmError::Input("sample is empty".into()))?;
    let d = first.len();
    if d == 0 {
        return Err(DnmmError::Input("points must have at least one coordinate".into()));
    }
    for x in data {
        check_dim(d, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DnmmError::Input(format!("non-finite sample point {x:?}")));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

/// Lloyd iterations from k-means++ seeds; the best of `restarts` runs by inertia.
pub fn kmeans<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, config: KMeansConfig, rng: &mut R) -> Result<KMeans> {
    check_sample(data)?;
    if k == 0 || data.len() < k {
        return Err(DnmmError::Input(format!(
            "k-means needs 1 <= k <= n, got k = {k}, n = {}",
            data.len()
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..config.restarts.max(1) {
        let run = lloyd(data, plus_plus_seeds(data, k, rng), config.max_iters, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seeds<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u <= 0.0
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[pick].clone();
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(x, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty centers")
}

fn lloyd<R: Rng + ?Sized>(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize, rng: &mut R) -> KMeans {
    let d = data[0].len();
    let k = centers.len();
    let mut assignments = vec![usize::MAX; data.len()];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (a, x) in assignments.iter_mut().zip(data) {
            let (i, _) = nearest(x, &centers);
            if *a != i {
                *a = i;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, x) in assignments.iter().zip(data) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for i in 0..k {
            if counts[i] == 0 {
                centers[i] = data[rng.random_range(0..data.len())].clone();
                reseeded = true;
            } else {
                centers[i] = sums[i].iter().map(|s| s / counts[i] as f64).collect();
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, x) in assignments.iter_mut().zip(data) {
        let (i, dist) = nearest(x, &centers);
        *a = i;
        inertia += dist;
    }
    KMeans {
        centers,
        assignments,
        inertia,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

impl CovarianceKind {
    pub fn for_dim(d: usize) -> Self {
        if d <= FULL_COVARIANCE_MAX_DIM {
            Self::Full
        } else {
            Self::Diagonal
        }
    }
}

/// Cholesky factor and normalizing constant of one component.
#[derive(Debug, Clone, PartialEq)]
struct GaussianCache {
    chol: Vec<f64>,
    log_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmDoc", into = "GmmDoc")]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major `d × d` for full covariances, the `d` variances otherwise.
    covariances: Vec<Vec<f64>>,
    kind: CovarianceKind,
    cache: Vec<GaussianCache>,
}

#[derive(Serialize, Deserialize)]
struct GmmDoc {
    covariance: CovarianceKind,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

impl TryFrom<GmmDoc> for Gmm {
    type Error = DnmmError;

    fn try_from(doc: GmmDoc) -> Result<Self> {
        Gmm::new(doc.weights, doc.means, doc.covariances, doc.covariance)
    }
}

impl From<Gmm> for GmmDoc {
    fn from(g: Gmm) -> Self {
        GmmDoc {
            covariance: g.kind,
            weights: g.weights,
            means: g.means,
            covariances: g.covariances,
        }
    }
}

impl Gmm {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
        kind: CovarianceKind,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(DnmmError::Input("a mixture needs at least one component".into()));
        }
        check_dim(k, means.len())?;
        check_dim(k, covariances.len())?;
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DnmmError::Input(format!(
                "weights must be a probability vector, sum {total}"
            )));
        }
        let d = means[0].len();
        let cache = means
            .iter()
            .zip(&covariances)
            .map(|(m, c)| {
                check_dim(d, m.len())?;
                gaussian_cache(c, d, kind)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            weights,
            means,
            covariances,
            kind,
            cache,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    fn component_log_pdf(&self, i: usize, x: &[f64]) -> f64 {
        let d = self.dim();
        let cache = &self.cache[i];
        let mean = &self.means[i];
        let quad = match self.kind {
            CovarianceKind::Diagonal => x
                .iter()
                .zip(mean)
                .zip(&self.covariances[i])
                .map(|((v, m), s)| (v - m) * (v - m) / s)
                .sum::<f64>(),
            CovarianceKind::Full => {
                // forward substitution L y = x − μ
                let l = &cache.chol;
                let mut y = [0.0; FULL_COVARIANCE_MAX_DIM];
                let mut q = 0.0;
                for r in 0..d {
                    let mut s = x[r] - mean[r];
                    for c in 0..r {
                        s -= l[r * d + c] * y[c];
                    }
                    y[r] = s / l[r * d + r];
                    q += y[r] * y[r];
                }
                q
            }
        };
        cache.log_norm - 0.5 * quad
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.k())
            .map(|i| self.weights[i].ln() + self.component_log_pdf(i, x))
            .collect();
        log_sum_exp(&logs)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        data.iter().map(|x| self.log_pdf(x)).sum::<f64>() / data.len() as f64
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        let cov = match self.kind {
            CovarianceKind::Full => d * (d + 1) / 2,
            CovarianceKind::Diagonal => d,
        };
        self.k() * (d + cov + 1) - 1
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn gaussian_cache(cov: &[f64], d: usize, kind: CovarianceKind) -> Result<GaussianCache> {
    match kind {
        CovarianceKind::Diagonal => {
            check_dim(d, cov.len())?;
            if cov.iter().any(|s| !(*s > 0.0)) {
                return Err(DnmmError::Input("variances must be positive".into()));
            }
            let log_det: f64 = cov.iter().map(|s| s.ln()).sum();
            Ok(GaussianCache {
                chol: Vec::new(),
                log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            })
        }
        CovarianceKind::Full => {
            check_dim(d * d, cov.len())?;
            if d > FULL_COVARIANCE_MAX_DIM {
                return Err(DnmmError::Input(format!(
                    "full covariances are limited to d <= {FULL_COVARIANCE_MAX_DIM}"
                )));
            }
            let m = DMatrix::from_row_slice(d, d, cov);
            let chol = m
                .cholesky()
                .ok_or_else(|| DnmmError::Input("covariance is not positive definite".into()))?;
            let l = chol.l();
            let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
            let mut flat = vec![0.0; d * d];
            for r in 0..d {
                for c in 0..=r {
                    flat[r * d + c] = l[(r, c)];
                }
            }
            Ok(GaussianCache {
                chol: flat,
                log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            })
        }
    }
}

/// Symmetric matrix with eigenvalues clipped from below.
fn clip_covariance(flat: &[f64], d: usize, floor: f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, flat);
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = 0.5 * (rebuilt[(r, c)] + rebuilt[(c, r)]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Stop once the mean log-likelihood gains less than this.
    pub tol: f64,
    pub kmeans: KMeansConfig,
    /// `None` picks by dimension.
    pub covariance: Option<CovarianceKind>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            kmeans: KMeansConfig::default(),
            covariance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: Gmm,
    /// Mean training log-likelihood before each M-step and after the last one.
    pub log_likelihoods: Vec<f64>,
}

/// Weighted Gaussian ML estimates for one component.
fn weighted_moments(data: &[Vec<f64>], resp: &[f64], kind: CovarianceKind) -> (f64, Vec<f64>, Vec<f64>) {
    let d = data[0].len();
    let nk: f64 = resp.iter().sum();
    let mut mean = vec![0.0; d];
    for (x, r) in data.iter().zip(resp) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let cov = match kind {
        CovarianceKind::Diagonal => {
            let mut var = vec![0.0; d];
            for (x, r) in data.iter().zip(resp) {
                for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                    *s += r * (v - m) * (v - m);
                }
            }
            var.iter().map(|s| (s / nk).max(VARIANCE_FLOOR)).collect()
        }
        CovarianceKind::Full => {
            let mut cov = vec![0.0; d * d];
            for (x, r) in data.iter().zip(resp) {
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] += r * (x[a] - mean[a]) * (x[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= nk);
            clip_covariance(&cov, d, VARIANCE_FLOOR)
        }
    };
    (nk, mean, cov)
}

/// k-means initialization followed by EM until the likelihood gain drops below `tol`.
pub fn gmm_fit<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, config: GmmConfig, rng: &mut R) -> Result<GmmFit> {
    let d = check_sample(data)?;
    if k == 0 || data.len() < k {
        return Err(DnmmError::Input(format!(
            "a {k}-component mixture needs at least {k} points, got {}",
            data.len()
        )));
    }
    let n = data.len();
    let kind = config.covariance.unwrap_or(CovarianceKind::for_dim(d));
    let km = kmeans(data, k, config.kmeans, rng)?;

    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for i in 0..k {
        let resp: Vec<f64> = km.assignments.iter().map(|&a| if a == i { 1.0 } else { 0.0 }).collect();
        let count: f64 = resp.iter().sum();
        if count == 0.0 {
            // the center survived Lloyd's loop but owns no point; treat it as a unit-mass seed
            weights.push(1.0 / n as f64);
            means.push(km.centers[i].clone());
            covs.push(match kind {
                CovarianceKind::Full => clip_covariance(&vec![0.0; d * d], d, VARIANCE_FLOOR),
                CovarianceKind::Diagonal => vec![VARIANCE_FLOOR; d],
            });
            continue;
        }
        let (nk, mean, cov) = weighted_moments(data, &resp, kind);
        weights.push(nk / n as f64);
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut model = Gmm::new(weights, means, covs, kind)?;

    let mut history = Vec::new();
    let mut resp = vec![vec![0.0; n]; k];
    let mut logs = vec![0.0; k];
    for _ in 0..config.max_iters.max(1) {
        // E-step
        let mut ll = 0.0;
        for (j, x) in data.iter().enumerate() {
            for (i, l) in logs.iter_mut().enumerate() {
                *l = model.weights[i].ln() + model.component_log_pdf(i, x);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for i in 0..k {
                resp[i][j] = (logs[i] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if let Some(&prev) = history.last() {
            if ll - prev < config.tol {
                history.push(ll);
                return Ok(GmmFit {
                    model,
                    log_likelihoods: history,
                });
            }
        }
        history.push(ll);

        // M-step
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for i in 0..k {
            let nk: f64 = resp[i].iter().sum();
            if nk < 1e-12 {
                // no responsibility left; keep the old shape with vanishing weight
                weights.push(nk / n as f64);
                means.push(model.means[i].clone());
                covs.push(model.covariances[i].clone());
                continue;
            }
            let (nk, mean, cov) = weighted_moments(data, &resp[i], kind);
            weights.push(nk / n as f64);
            means.push(mean);
            covs.push(cov);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        model = Gmm::new(weights, means, covs, kind)?;
    }
    history.push(model.mean_log_likelihood(data));
    Ok(GmmFit {
        model,
        log_likelihoods: history,
    })
}

/// Isotropic Gaussian kernels of width `h1 / √n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParzenModel {
    h1: f64,
    sample: Vec<Vec<f64>>,
}

impl ParzenModel {
    pub fn new(sample: Vec<Vec<f64>>, h1: f64) -> Result<Self> {
        check_sample(&sample)?;
        if !(h1 > 0.0 && h1.is_finite()) {
            return Err(DnmmError::Input(format!("base bandwidth must be positive, got {h1}")));
        }
        Ok(Self { h1, sample })
    }

    pub fn h1(&self) -> f64 {
        self.h1
    }

    pub fn bandwidth(&self) -> f64 {
        self.h1 / (self.sample.len() as f64).sqrt()
    }

    pub fn sample(&self) -> &[Vec<f64>] {
        &self.sample
    }

    pub fn dim(&self) -> usize {
        self.sample[0].len()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let h = self.bandwidth();
        let d = self.dim() as f64;
        let norm = (2.0 * PI * h * h).powf(-0.5 * d);
        let inv = -0.5 / (h * h);
        let s: f64 = self.sample.iter().map(|c| (inv * sq_dist(x, c)).exp()).sum();
        norm * s / self.sample.len() as f64
    }
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_d = V_{d-2} · 2π / d
    let mut v = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if d.is_multiple_of(2) { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}

/// `k_n / (n V_d r^d)` with `r` the distance to the `k_n`-th nearest sample
/// point. Not a normalized density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k1: f64,
    sample: Vec<Vec<f64>>,
}

impl KnnModel {
    pub fn new(sample: Vec<Vec<f64>>, k1: f64) -> Result<Self> {
        check_sample(&sample)?;
        if !(k1 > 0.0 && k1.is_finite()) {
            return Err(DnmmError::Input(format!("k1 must be positive, got {k1}")));
        }
        Ok(Self { k1, sample })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn sample(&self) -> &[Vec<f64>] {
        &self.sample
    }

    pub fn dim(&self) -> usize {
        self.sample[0].len()
    }

    pub fn kn(&self) -> usize {
        let n = self.sample.len();
        ((self.k1 * (n as f64).sqrt() + 0.5).floor() as usize).clamp(1, n)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let n = self.sample.len();
        let kn = self.kn();
        let mut d2: Vec<f64> = self.sample.iter().map(|c| sq_dist(x, c)).collect();
        let (_, kth, _) = d2.select_nth_unstable_by(kn - 1, f64::total_cmp);
        let r = kth.sqrt().max(KNN_RADIUS_FLOOR);
        let d = self.dim();
        kn as f64 / (n as f64 * unit_ball_volume(d) * r.powi(d as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Baseline {
    Gmm(Gmm),
    Parzen(ParzenModel),
    Knn(KnnModel),
}

impl Baseline {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gmm(m) => m.dim(),
            Self::Parzen(m) => m.dim(),
            Self::Knn(m) => m.dim(),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gmm(m) => m.pdf(x),
            Self::Parzen(m) => m.pdf(x),
            Self::Knn(m) => m.pdf(x),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Density for Baseline {
    fn dim(&self) -> usize {
        Baseline::dim(self)
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.pdf(x)
    }
}
