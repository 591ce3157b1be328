use dnmm::eval::{simpson, simpson_tensor};
use dnmm::synth::{gumbel_cdf, gumbel_pdf, FtMixture, MGev, DEFAULT_GRID_CAP};
use dnmm::DomainBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeSet;

const DRAWS: usize = 100_000;

fn ks_statistic<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// χ² goodness-of-fit p-value on 50 equal-width bins over the sample range,
/// merging adjacent bins until each expects at least five draws.
fn chi_square_p<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = 50;
    let width = (hi - lo) / bins as f64;
    let mut observed = vec![0.0; bins];
    for x in xs {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        observed[b] += 1.0;
    }
    let n = xs.len() as f64;
    let edge = |b: usize| match b {
        0 => 0.0,
        b if b == bins => 1.0,
        b => cdf(lo + b as f64 * width),
    };
    let mut cells = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for b in 0..bins {
        obs += observed[b];
        exp += n * (edge(b + 1) - edge(b));
        if exp >= 5.0 {
            cells.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += obs;
        last.1 += exp;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (cells.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn single_gumbel_sample_matches_cdf() {
    let mix = FtMixture::new(vec![1.0], vec![3.0], vec![0.7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = mix.sample(DRAWS, &mut rng);
    let ks = ks_statistic(xs.clone(), |x| gumbel_cdf(x, 3.0, 0.7));
    assert!(ks < 0.01, "KS = {ks}");
    let p = chi_square_p(&xs, |x| gumbel_cdf(x, 3.0, 0.7));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn random_ft_task_sample_matches_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mix = FtMixture::random_task(5, &mut rng).unwrap();
    let xs = mix.sample(DRAWS, &mut rng);
    let ks = ks_statistic(xs.clone(), |x| mix.cdf(x));
    assert!(ks < 0.01, "KS = {ks}");
    let p = chi_square_p(&xs, |x| mix.cdf(x));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn univariate_mgev_matches_ft_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = MGev::random_task(1, 3, DEFAULT_GRID_CAP, &mut rng).unwrap();
    let mix = FtMixture::new(
        vec![1.0 / 3.0; 3],
        target.mode_locations()[0].clone(),
        target.mode_scales()[0].clone(),
    )
    .unwrap();
    let xs: Vec<f64> = target.sample(DRAWS, &mut rng).into_iter().map(|p| p[0]).collect();
    let ks = ks_statistic(xs, |x| mix.cdf(x));
    assert!(ks < 0.01, "KS = {ks}");
    for x in [0.1, 0.35, 0.5, 0.8] {
        assert!((target.pdf(&[x]).unwrap() - mix.pdf(x)).abs() <= 1e-12 * mix.pdf(x).max(1.0));
    }
}

#[test]
fn mgev_marginals_match_mode_mixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = MGev::random_task(3, 2, DEFAULT_GRID_CAP, &mut rng).unwrap();
    let points = target.sample(DRAWS, &mut rng);
    for i in 0..3 {
        let xs: Vec<f64> = points.iter().map(|p| p[i]).collect();
        let ks = ks_statistic(xs.clone(), |x| target.marginal_cdf(i, x));
        assert!(ks < 0.015, "dimension {i}: KS = {ks}");
        let p = chi_square_p(&xs, |x| target.marginal_cdf(i, x));
        assert!(p > 0.01, "dimension {i}: p = {p}");
    }
}

#[test]
fn mgev_integrates_to_one_over_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = MGev::random_task(2, 2, DEFAULT_GRID_CAP, &mut rng).unwrap();
    let domain = DomainBox::cube(2, 0.0, 1.1).unwrap();
    let integral = simpson_tensor(|x| target.pdf(x).unwrap(), &domain, 401).unwrap();
    assert!((integral - 1.0).abs() < 0.025, "integral = {integral}");
}

#[test]
fn single_mode_mgev_is_a_product_of_gumbels() {
    let target = MGev::new(
        vec![vec![0.3], vec![0.6]],
        vec![vec![0.04], vec![0.03]],
        DEFAULT_GRID_CAP,
    )
    .unwrap();
    for x in [[0.3, 0.6], [0.25, 0.7], [0.5, 0.55]] {
        let product = gumbel_pdf(x[0], 0.3, 0.04) * gumbel_pdf(x[1], 0.6, 0.03);
        assert!((target.pdf(&x).unwrap() - product).abs() <= 1e-12 * product);
    }
}

#[test]
fn mgev_grid_is_a_bijection() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = MGev::random_task(3, 3, DEFAULT_GRID_CAP, &mut rng).unwrap();
    let rows: BTreeSet<Vec<usize>> = (0..target.total_components())
        .map(|k| target.grid_row(k).to_vec())
        .collect();
    assert_eq!(rows.len(), 27);
    assert!(rows.iter().all(|r| r.len() == 3 && r.iter().all(|j| *j < 3)));
}

#[test]
fn ft_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mix = FtMixture::random_task(5, &mut rng).unwrap();
    let beta_max = mix.scales().iter().copied().fold(0.0, f64::max);
    let lo = mix.locations().iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * beta_max;
    let hi = mix.locations().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * beta_max;
    let integral = simpson(|x| mix.pdf(x), lo, hi, 200_001).unwrap();
    assert!((integral - 1.0).abs() < 1e-3, "integral = {integral}");
    assert!((0..=1000).all(|i| mix.pdf(lo + (hi - lo) * i as f64 / 1000.0) >= 0.0));
}
