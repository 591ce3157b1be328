//! Ground-truth targets with exact densities and exact samplers.
//!
//! Univariate tasks are mixtures of Gumbel (Fisher-Tippett type I) densities;
//! multivariate tasks are uniform mixtures of products of independent
//! Gumbels whose per-dimension parameters range over every combination of
//! `c` entries per dimension.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DnmmError, Result};

/// Default cap on the number of m-GEV grid components.
pub const DEFAULT_GRID_CAP: usize = 1_000_000;

pub fn gumbel_log_pdf(x: f64, mu: f64, beta: f64) -> f64 {
    let z = (x - mu) / beta;
    -beta.ln() - z - (-z).exp()
}

pub fn gumbel_pdf(x: f64, mu: f64, beta: f64) -> f64 {
    gumbel_log_pdf(x, mu, beta).exp()
}

pub fn gumbel_cdf(x: f64, mu: f64, beta: f64) -> f64 {
    (-(-(x - mu) / beta).exp()).exp()
}

/// Inverse transform: `μ − β ln(−ln u)`.
pub fn gumbel_quantile(u: f64, mu: f64, beta: f64) -> f64 {
    mu - beta * (-u.ln()).ln()
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn open_range<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Mixture of `c` Gumbel densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtMixture {
    weights: Vec<f64>,
    mu: Vec<f64>,
    beta: Vec<f64>,
}

impl FtMixture {
    pub fn new(weights: Vec<f64>, mu: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(DnmmError::Input("mixture needs at least one component".into()));
        }
        check_dim(weights.len(), mu.len())?;
        check_dim(weights.len(), beta.len())?;
        if beta.iter().any(|b| !(*b > 0.0)) {
            return Err(DnmmError::Input("Gumbel scales must be positive".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(DnmmError::Input("mixing weights must lie on the simplex".into()));
        }
        Ok(Self { weights, mu, beta })
    }

    /// Weights `U(0,1)` then normalized, scales `U(0.01, 0.9)`, locations `U(0, 10)`.
    pub fn random_task<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Result<Self> {
        if c == 0 {
            return Err(DnmmError::Input("c must be at least 1".into()));
        }
        let raw: Vec<f64> = (0..c).map(|_| open_unit(rng)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let beta = (0..c).map(|_| open_range(0.01, 0.9, rng)).collect();
        let mu = (0..c).map(|_| open_range(0.0, 10.0, rng)).collect();
        Self::new(weights, mu, beta)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &[f64] {
        &self.mu
    }

    pub fn scales(&self) -> &[f64] {
        &self.beta
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.mu.iter().zip(&self.beta))
            .map(|(p, (m, b))| p * gumbel_pdf(x, *m, *b))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.mu.iter().zip(&self.beta))
            .map(|(p, (m, b))| p * gumbel_cdf(x, *m, *b))
            .sum()
    }

    /// Draw one value from uniform variates: `pick` chooses the component, `u` is the quantile level.
    pub fn sample_from_uniforms(&self, pick: f64, u: f64) -> f64 {
        let mut acc = 0.0;
        let mut i = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if pick < acc {
                i = j;
                break;
            }
        }
        gumbel_quantile(u, self.mu[i], self.beta[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        (0..count)
            .map(|_| {
                let i = categorical(&self.weights, rng);
                gumbel_quantile(open_unit(rng), self.mu[i], self.beta[i])
            })
            .collect()
    }
}

/// Uniform mixture of `c^d` products of independent Gumbels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MGev {
    d: usize,
    c: usize,
    /// `mu_bar[i][j]`: location of the `j`-th mode along dimension `i`.
    mu_bar: Vec<Vec<f64>>,
    beta_bar: Vec<Vec<f64>>,
    #[serde(skip)]
    grid: Vec<Vec<usize>>,
}

impl MGev {
    pub fn new(mu_bar: Vec<Vec<f64>>, beta_bar: Vec<Vec<f64>>, cap: usize) -> Result<Self> {
        let d = mu_bar.len();
        if d == 0 {
            return Err(DnmmError::Input("m-GEV needs at least one dimension".into()));
        }
        check_dim(d, beta_bar.len())?;
        let c = mu_bar[0].len();
        if c == 0 {
            return Err(DnmmError::Input("m-GEV needs at least one mode per dimension".into()));
        }
        for (m, b) in mu_bar.iter().zip(&beta_bar) {
            check_dim(c, m.len())?;
            check_dim(c, b.len())?;
            if b.iter().any(|v| !(*v > 0.0)) {
                return Err(DnmmError::Input("Gumbel scales must be positive".into()));
            }
        }
        let size = (c as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        if size > cap as u128 {
            return Err(DnmmError::TooLarge { size, cap });
        }
        let grid = index_grid(d, c);
        Ok(Self {
            d,
            c,
            mu_bar,
            beta_bar,
            grid,
        })
    }

    /// Locations `U(0.1, 0.9)` and scales `U(0.03, 0.05)` per dimension and mode.
    pub fn random_task<R: Rng + ?Sized>(d: usize, c: usize, cap: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || c == 0 {
            return Err(DnmmError::Input("d and c must be at least 1".into()));
        }
        let size = (c as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        if size > cap as u128 {
            return Err(DnmmError::TooLarge { size, cap });
        }
        let mut mu_bar = Vec::with_capacity(d);
        let mut beta_bar = Vec::with_capacity(d);
        for _ in 0..d {
            mu_bar.push((0..c).map(|_| open_range(0.1, 0.9, rng)).collect());
            beta_bar.push((0..c).map(|_| open_range(0.03, 0.05, rng)).collect());
        }
        Self::new(mu_bar, beta_bar, cap)
    }

    /// Rebuilds the index grid after deserialization.
    pub fn rebuild(self, cap: usize) -> Result<Self> {
        Self::new(self.mu_bar, self.beta_bar, cap)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn modes(&self) -> usize {
        self.c
    }

    pub fn total_components(&self) -> usize {
        self.grid.len()
    }

    /// Per-dimension mode indices of grid component `k`.
    pub fn grid_row(&self, k: usize) -> &[usize] {
        &self.grid[k]
    }

    pub fn location(&self, k: usize) -> Vec<f64> {
        self.grid[k]
            .iter()
            .enumerate()
            .map(|(i, &j)| self.mu_bar[i][j])
            .collect()
    }

    pub fn scale(&self, k: usize) -> Vec<f64> {
        self.grid[k]
            .iter()
            .enumerate()
            .map(|(i, &j)| self.beta_bar[i][j])
            .collect()
    }

    pub fn mode_locations(&self) -> &[Vec<f64>] {
        &self.mu_bar
    }

    pub fn mode_scales(&self) -> &[Vec<f64>] {
        &self.beta_bar
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.d, x.len())?;
        Ok(self.pdf_unchecked(x))
    }

    fn pdf_unchecked(&self, x: &[f64]) -> f64 {
        // log densities per dimension and mode, combined by log-sum-exp over the grid
        let table: Vec<Vec<f64>> = (0..self.d)
            .map(|i| {
                (0..self.c)
                    .map(|j| gumbel_log_pdf(x[i], self.mu_bar[i][j], self.beta_bar[i][j]))
                    .collect()
            })
            .collect();
        let logs: Vec<f64> = self
            .grid
            .iter()
            .map(|row| row.iter().enumerate().map(|(i, &j)| table[i][j]).sum())
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return 0.0;
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        (max + (sum / self.grid.len() as f64).ln()).exp()
    }

    /// Marginal CDF along dimension `i`: a uniform mixture of that dimension's `c` Gumbels.
    pub fn marginal_cdf(&self, i: usize, x: f64) -> f64 {
        (0..self.c)
            .map(|j| gumbel_cdf(x, self.mu_bar[i][j], self.beta_bar[i][j]))
            .sum::<f64>()
            / self.c as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let k = rng.random_range(0..self.grid.len());
                self.grid[k]
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| gumbel_quantile(open_unit(rng), self.mu_bar[i][j], self.beta_bar[i][j]))
                    .collect()
            })
            .collect()
    }
}

/// All `c^d` index tuples, last dimension varying fastest.
fn index_grid(d: usize, c: usize) -> Vec<Vec<usize>> {
    let total = c.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut row = vec![0; d];
            for slot in row.iter_mut().rev() {
                *slot = k % c;
                k /= c;
            }
            row
        })
        .collect()
}

/// A ground-truth density: either generator family, tagged for JSON replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetDensity {
    FisherTippett(FtMixture),
    MGev(MGev),
}

impl TargetDensity {
    pub fn dim(&self) -> usize {
        match self {
            TargetDensity::FisherTippett(_) => 1,
            TargetDensity::MGev(g) => g.dim(),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetDensity::FisherTippett(m) => {
                check_dim(1, x.len())?;
                Ok(m.pdf(x[0]))
            }
            TargetDensity::MGev(g) => g.pdf(x),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        match self {
            TargetDensity::FisherTippett(m) => m.sample(count, rng).into_iter().map(|v| vec![v]).collect(),
            TargetDensity::MGev(g) => g.sample(count, rng),
        }
    }

    /// Restores derived state after deserialization.
    pub fn rebuild(self) -> Result<Self> {
        Ok(match self {
            TargetDensity::MGev(g) => TargetDensity::MGev(g.rebuild(DEFAULT_GRID_CAP)?),
            other => other,
        })
    }
}

/// Shuffles `sample` and splits it into `(train, validation)` with `n_train` training points.
pub fn split_sample<T, R: Rng + ?Sized>(mut sample: Vec<T>, n_train: usize, rng: &mut R) -> Result<(Vec<T>, Vec<T>)> {
    if n_train > sample.len() {
        return Err(DnmmError::Input(format!(
            "cannot take {n_train} training points from {}",
            sample.len()
        )));
    }
    sample.shuffle(rng);
    let validation = sample.split_off(n_train);
    Ok((sample, validation))
}

impl crate::eval::Density for TargetDensity {
    fn dim(&self) -> usize {
        TargetDensity::dim(self)
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.pdf(x).unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_gumbel_at_location() {
        let m = FtMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        assert!((m.pdf(0.0) - (-1f64).exp()).abs() < 1e-15);
        assert!((m.pdf(0.0) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn location_scale_invariance() {
        let base = FtMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let moved = FtMixture::new(vec![1.0], vec![3.0], vec![0.25]).unwrap();
        for z in [-2.0, -0.3, 0.0, 1.1, 4.0] {
            let a = base.pdf(z);
            let b = 0.25 * moved.pdf(3.0 + 0.25 * z);
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_component_hand_sum() {
        let m = FtMixture::new(vec![0.3, 0.7], vec![1.0, 2.0], vec![0.5, 0.2]).unwrap();
        let x: f64 = 1.5;
        let z1 = (x - 1.0) / 0.5;
        let z2 = (x - 2.0) / 0.2;
        let hand = 0.3 / 0.5 * (-z1).exp() * (-(-z1).exp()).exp() + 0.7 / 0.2 * (-z2).exp() * (-(-z2).exp()).exp();
        assert!((m.pdf(x) - hand).abs() < 1e-14);
    }

    #[test]
    fn median_quantile() {
        let m = FtMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let x = m.sample_from_uniforms(0.3, 0.5);
        assert!((x + 2f64.ln().ln()).abs() < 1e-15);
        assert!((x - 0.36651).abs() < 1e-5);
    }

    #[test]
    fn scale_stretches_draws_about_location() {
        let a = FtMixture::new(vec![1.0], vec![2.0], vec![0.5]).unwrap();
        let b = FtMixture::new(vec![1.0], vec![2.0], vec![1.5]).unwrap();
        let xa = a.sample(50, &mut ChaCha8Rng::seed_from_u64(3));
        let xb = b.sample(50, &mut ChaCha8Rng::seed_from_u64(3));
        for (u, v) in xa.iter().zip(&xb) {
            assert!(((v - 2.0) - 3.0 * (u - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_task_ranges_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for c in [1, 5, 20] {
            let t = FtMixture::random_task(c, &mut rng).unwrap();
            assert!((t.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.scales().iter().all(|b| *b > 0.01 && *b < 0.9));
            assert!(t.locations().iter().all(|m| *m > 0.0 && *m < 10.0));
        }
        let one = FtMixture::random_task(1, &mut rng).unwrap();
        assert_eq!(one.weights(), &[1.0]);
        let a = FtMixture::random_task(5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = FtMixture::random_task(5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_enumerates_all_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = MGev::random_task(2, 2, DEFAULT_GRID_CAP, &mut rng).unwrap();
        let rows: Vec<Vec<usize>> = (0..4).map(|k| g.grid_row(k).to_vec()).collect();
        assert_eq!(rows, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(
            MGev::random_task(2, 5, DEFAULT_GRID_CAP, &mut rng)
                .unwrap()
                .total_components(),
            25
        );
        let line = MGev::random_task(1, 3, DEFAULT_GRID_CAP, &mut rng).unwrap();
        for k in 0..3 {
            assert_eq!(line.location(k), vec![line.mode_locations()[0][k]]);
        }
    }

    #[test]
    fn grid_is_bijective() {
        let grid = index_grid(3, 4);
        let mut seen = std::collections::HashSet::new();
        for row in &grid {
            assert!(row.iter().all(|&j| j < 4));
            assert!(seen.insert(row.clone()));
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn grid_cap_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            MGev::random_task(8, 10, DEFAULT_GRID_CAP, &mut rng),
            Err(DnmmError::TooLarge { .. })
        ));
    }

    #[test]
    fn one_dimensional_mgev_is_uniform_ft_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = MGev::random_task(1, 3, DEFAULT_GRID_CAP, &mut rng).unwrap();
        let ft = FtMixture::new(
            vec![1.0 / 3.0; 3],
            g.mode_locations()[0].clone(),
            g.mode_scales()[0].clone(),
        )
        .unwrap();
        for x in [0.0, 0.2, 0.45, 0.8, 1.05] {
            let a = g.pdf(&[x]).unwrap();
            let b = ft.pdf(x);
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn single_mode_product_form() {
        let g = MGev::new(
            vec![vec![0.4], vec![0.6]],
            vec![vec![0.04], vec![0.035]],
            DEFAULT_GRID_CAP,
        )
        .unwrap();
        let x = [0.45, 0.55];
        let expected = gumbel_pdf(0.45, 0.4, 0.04) * gumbel_pdf(0.55, 0.6, 0.035);
        assert!((g.pdf(&x).unwrap() - expected).abs() < 1e-12 * expected);
        assert!(g.pdf(&[0.1]).is_err());
    }

    #[test]
    fn eight_dimensional_evaluation_does_not_underflow_to_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = MGev::random_task(8, 2, DEFAULT_GRID_CAP, &mut rng).unwrap();
        let x = g.sample(5, &mut rng);
        for p in x {
            let v = g.pdf(&p).unwrap();
            assert!(v.is_finite() && v > 0.0);
        }
    }

    #[test]
    fn target_json_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TargetDensity::MGev(MGev::random_task(2, 2, DEFAULT_GRID_CAP, &mut rng).unwrap());
        let text = serde_json::to_string(&t).unwrap();
        let back: TargetDensity = serde_json::from_str::<TargetDensity>(&text).unwrap().rebuild().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = split_sample((0..1200).collect(), 800, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (800, 400));
        assert!(split_sample(vec![1, 2], 3, &mut rng).is_err());
    }
}
