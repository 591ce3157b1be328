//! Scoring: integrated squared error, validation log-likelihood, relative
//! ISE reduction and Welch's unequal-variance t-test.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnmmError, Result};
use crate::integrate::DomainBox;

/// Floor applied to densities before taking logarithms.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// Anything that can be evaluated as a density on `R^d`.
pub trait Density {
    fn dim(&self) -> usize;
    fn density(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> Density for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }

    fn density(&self, x: &[f64]) -> f64 {
        (self.1)(x)
    }
}

/// Composite Simpson rule over `[a, b]` with an odd number of nodes.
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, nodes: usize) -> Result<f64> {
    if nodes < 3 || nodes.is_multiple_of(2) {
        return Err(DnmmError::Input(format!(
            "Simpson needs an odd node count >= 3, got {nodes}"
        )));
    }
    let h = (b - a) / (nodes - 1) as f64;
    let mut sum = f(a) + f(b);
    for i in 1..nodes - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + h * i as f64);
    }
    Ok(sum * h / 3.0)
}

/// Tensor-product Simpson rule over a box, `nodes` per dimension.
pub fn simpson_tensor<F: FnMut(&[f64]) -> f64>(mut f: F, domain: &DomainBox, nodes: usize) -> Result<f64> {
    if nodes < 3 || nodes.is_multiple_of(2) {
        return Err(DnmmError::Input(format!(
            "Simpson needs an odd node count >= 3, got {nodes}"
        )));
    }
    let d = domain.dim();
    let steps: Vec<f64> = (0..d)
        .map(|i| (domain.upper()[i] - domain.lower()[i]) / (nodes - 1) as f64)
        .collect();
    let weight = |i: usize| {
        if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for i in 0..d {
            x[i] = domain.lower()[i] + steps[i] * idx[i] as f64;
            w *= weight(idx[i]);
        }
        total += w * f(&x);
        let mut i = 0;
        loop {
            idx[i] += 1;
            if idx[i] < nodes {
                break;
            }
            idx[i] = 0;
            i += 1;
            if i == d {
                return Ok(total * steps.iter().map(|h| h / 3.0).product::<f64>());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IseMethod {
    Simpson,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IseResult {
    pub value: f64,
    pub method: IseMethod,
    /// Node count (Simpson) or sample count (Monte Carlo).
    pub count: usize,
    /// Standard error of the Monte Carlo estimate.
    pub std_error: Option<f64>,
}

/// `∫ (p − q)²` over `[a, b]` by composite Simpson.
pub fn ise_simpson_1d<P, Q>(mut p: P, mut q: Q, a: f64, b: f64, nodes: usize) -> Result<IseResult>
where
    P: FnMut(f64) -> f64,
    Q: FnMut(f64) -> f64,
{
    let value = simpson(|x| (p(x) - q(x)).powi(2), a, b, nodes)?;
    Ok(IseResult {
        value: value.max(0.0),
        method: IseMethod::Simpson,
        count: nodes,
        std_error: None,
    })
}

/// `V(S) · mean((p − q)²)` at uniform points of `domain`, with its standard error.
pub fn ise_mc<P, Q, R>(mut p: P, mut q: Q, domain: &DomainBox, samples: usize, rng: &mut R) -> Result<IseResult>
where
    P: FnMut(&[f64]) -> f64,
    Q: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if samples < 2 {
        return Err(DnmmError::Input("Monte Carlo ISE needs at least two samples".into()));
    }
    let volume = domain.volume();
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let x = domain.sample_uniform(rng);
        let v = (p(&x) - q(&x)).powi(2);
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(IseResult {
        value: volume * mean,
        method: IseMethod::MonteCarlo,
        count: samples,
        std_error: Some(volume * (var / samples as f64).sqrt()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub mean: f64,
    /// How many points fell below the likelihood floor.
    pub floored: usize,
}

/// `(1/n) Σ ln max(f(x), 1e-300)`.
pub fn mean_log_likelihood<F: FnMut(&[f64]) -> f64>(mut f: F, data: &[Vec<f64>]) -> Result<LogLikelihood> {
    if data.is_empty() {
        return Err(DnmmError::Input("log-likelihood of an empty sample".into()));
    }
    let mut floored = 0;
    let total: f64 = data
        .iter()
        .map(|x| {
            let v = f(x);
            if !(v >= LIKELIHOOD_FLOOR) {
                floored += 1;
                LIKELIHOOD_FLOOR.ln()
            } else {
                v.ln()
            }
        })
        .sum();
    Ok(LogLikelihood {
        mean: total / data.len() as f64,
        floored,
    })
}

/// `100 · (baseline − candidate) / baseline`.
pub fn relative_ise_reduction(baseline: &IseResult, candidate: &IseResult) -> Result<f64> {
    if !(baseline.value > 0.0) {
        return Err(DnmmError::Input("baseline ISE must be positive".into()));
    }
    Ok(100.0 * (baseline.value - candidate.value) / baseline.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's two-sample t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DnmmError::Input(
            "Welch's test needs at least two values per sample".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if !(va > 0.0 && vb > 0.0) {
        return Err(DnmmError::Input(
            "Welch's test needs nonzero variance in both samples".into(),
        ));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the continued fraction, evaluated with the modified Lentz method.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + even * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + even / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + odd * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + odd / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simpson_rejects_even_nodes() {
        assert!(simpson(|x| x, 0.0, 1.0, 4).is_err());
        assert!(simpson(|x| x, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 2.0, 3).unwrap();
        assert!((v - (15.0 / 4.0 - 3.0 + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn tensor_simpson_product() {
        let domain = DomainBox::new(vec![0.0, 1.0], vec![1.0, 3.0]).unwrap();
        let v = simpson_tensor(|x| x[0] * x[0] * x[1], &domain, 5).unwrap();
        assert!((v - (1.0 / 3.0) * 4.0).abs() < 1e-13);
    }

    #[test]
    fn identical_densities_have_zero_ise() {
        let f = |x: f64| (-x * x).exp();
        assert_eq!(ise_simpson_1d(f, f, -3.0, 3.0, 101).unwrap().value, 0.0);
        let g = |x: &[f64]| x[0] + x[1];
        let domain = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let r = ise_mc(g, g, &domain, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.std_error, Some(0.0));
    }

    #[test]
    fn step_density_ise() {
        let p = |_: f64| 1.0;
        let q = |x: f64| if x <= 0.5 { 2.0 } else { 0.0 };
        let r = ise_simpson_1d(p, q, 0.0, 1.0, 2001).unwrap();
        assert!((r.value - 1.0).abs() < 0.02);
    }

    #[test]
    fn constant_mc_ise() {
        let domain = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let r = ise_mc(|_| 1.0, |_| 0.0, &domain, 1000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn ise_is_symmetric() {
        let p = |x: f64| (-(x - 0.3).powi(2)).exp();
        let q = |x: f64| 0.5 * (-(x + 0.1).powi(2)).exp();
        let a = ise_simpson_1d(p, q, -4.0, 4.0, 401).unwrap().value;
        let b = ise_simpson_1d(q, p, -4.0, 4.0, 401).unwrap().value;
        assert_eq!(a, b);
        let domain = DomainBox::cube(1, -4.0, 4.0).unwrap();
        let pm = |x: &[f64]| p(x[0]);
        let qm = |x: &[f64]| q(x[0]);
        let a = ise_mc(pm, qm, &domain, 500, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .value;
        let b = ise_mc(qm, pm, &domain, 500, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .value;
        assert_eq!(a, b);
    }

    #[test]
    fn log_likelihood_cases() {
        let data = vec![vec![0.1], vec![0.5], vec![0.9]];
        let ll = mean_log_likelihood(|_| 0.25, &data).unwrap();
        assert!((ll.mean - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(ll.floored, 0);

        let ll = mean_log_likelihood(|x| x[0], &data).unwrap();
        let hand = (0.1f64.ln() + 0.5f64.ln() + 0.9f64.ln()) / 3.0;
        assert!((ll.mean - hand).abs() < 1e-15);

        let ll = mean_log_likelihood(|x| if x[0] < 0.2 { 0.0 } else { 1.0 }, &data).unwrap();
        assert!(ll.mean.is_finite());
        assert_eq!(ll.floored, 1);

        assert!(mean_log_likelihood(|_| 1.0, &[]).is_err());
    }

    fn ise(value: f64) -> IseResult {
        IseResult {
            value,
            method: IseMethod::Simpson,
            count: 3,
            std_error: None,
        }
    }

    #[test]
    fn reduction_cases() {
        assert_eq!(relative_ise_reduction(&ise(0.3), &ise(0.3)).unwrap(), 0.0);
        assert!((relative_ise_reduction(&ise(1.0), &ise(0.9044)).unwrap() - 9.56).abs() < 1e-9);
        assert_eq!(relative_ise_reduction(&ise(0.2), &ise(0.0)).unwrap(), 100.0);
        assert!(relative_ise_reduction(&ise(0.2), &ise(0.3)).unwrap() < 0.0);
        assert!(relative_ise_reduction(&ise(0.0), &ise(0.1)).is_err());
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn welch_large_shift() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [11.0, 12.0, 13.0, 14.0];
        assert!(welch_t_test(&a, &b).unwrap().p_value < 0.01);
    }

    #[test]
    fn welch_rejects_degenerate_variance() {
        assert!(welch_t_test(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn welch_hand_arithmetic() {
        // a: mean 20, s² = 10 (n = 5); b: mean 15, s² = 6 (n = 4)
        let a = [16.0, 18.0, 20.0, 22.0, 24.0];
        let b = [12.0, 14.0, 16.0, 18.0];
        let r = welch_t_test(&a, &b).unwrap();
        let se2: f64 = 10.0 / 5.0 + (20.0 / 3.0) / 4.0;
        assert!((r.t - 5.0 / se2.sqrt()).abs() < 1e-12);
        let df = se2 * se2 / ((2.0f64).powi(2) / 4.0 + (20.0f64 / 12.0).powi(2) / 3.0);
        assert!((r.df - df).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn t_one_degree_of_freedom_is_cauchy() {
        // P(|T| > t) = 1 − 2 atan(t)/π
        for t in [0.3, 1.0, 4.0, 30.0] {
            let expected = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided(t, 1.0) - expected).abs() < 1e-12);
        }
    }
}
