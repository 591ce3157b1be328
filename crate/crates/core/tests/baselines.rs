use dnmm::baselines::{gmm_fit, unit_ball_volume, CovarianceKind, GmmConfig};
use dnmm::eval::simpson;
use dnmm::{Baseline, KnnModel, ParzenModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(d: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

fn sample_and_query() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..5, 2usize..40).prop_flat_map(|(d, n)| (points(d, n), prop::collection::vec(-8.0f64..8.0, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn em_log_likelihood_never_decreases(data in points(2, 60), k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = gmm_fit(&data, k, GmmConfig::default(), &mut rng).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} then {}", w[0], w[1]);
        }
        prop_assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_em_log_likelihood_never_decreases(data in points(6, 50), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = gmm_fit(&data, 3, GmmConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(fit.model.kind(), CovarianceKind::Diagonal);
        for w in fit.log_likelihoods.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn estimators_are_finite_and_nonnegative((data, x) in sample_and_query(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gmm = gmm_fit(&data, 2.min(data.len()), GmmConfig::default(), &mut rng).unwrap().model;
        let models = [
            Baseline::Gmm(gmm),
            Baseline::Parzen(ParzenModel::new(data.clone(), 1.0).unwrap()),
            Baseline::Knn(KnnModel::new(data.clone(), 1.0).unwrap()),
        ];
        for m in &models {
            let on_datum = m.pdf(&data[0]);
            let off = m.pdf(&x);
            prop_assert!(on_datum.is_finite() && on_datum >= 0.0);
            prop_assert!(off.is_finite() && off >= 0.0);
        }
    }

    #[test]
    fn knn_is_translation_equivariant((data, x) in sample_and_query(), shift in -100.0f64..100.0) {
        let moved: Vec<Vec<f64>> = data.iter().map(|p| p.iter().map(|v| v + shift).collect()).collect();
        let mx: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let a = KnnModel::new(data, 1.0).unwrap().pdf(&x);
        let b = KnnModel::new(moved, 1.0).unwrap().pdf(&mx);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(b));
    }
}

#[test]
fn parzen_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Vec<f64>> = dnmm::synth::FtMixture::random_task(5, &mut rng)
        .unwrap()
        .sample(800, &mut rng)
        .into_iter()
        .map(|x| vec![x])
        .collect();
    let model = ParzenModel::new(data.clone(), 1.0).unwrap();
    let h = model.bandwidth();
    let lo = data.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - 8.0 * h;
    let hi = data.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + 8.0 * h;
    let integral = simpson(|x| model.pdf(&[x]), lo, hi, 100_001).unwrap();
    assert!((integral - 1.0).abs() < 1e-3, "integral = {integral}");
}

#[test]
fn knn_matches_brute_force_scan() {
    let data = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 2.0],
        vec![3.0, 3.0],
        vec![-1.0, 1.5],
    ];
    let model = KnnModel::new(data.clone(), 1.0).unwrap();
    // k_n = round(√5) = 2
    assert_eq!(model.kn(), 2);
    for x in [[0.2, 0.1], [2.0, 2.0], [-3.0, 0.0], [0.5, 1.0]] {
        let mut dist: Vec<f64> = data
            .iter()
            .map(|p| ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2)).sqrt())
            .collect();
        dist.sort_by(f64::total_cmp);
        let r = dist[1];
        let expected = 2.0 / (5.0 * std::f64::consts::PI * r * r);
        assert!((model.pdf(&x) - expected).abs() <= 1e-12 * expected);
    }
    assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
}

#[test]
fn two_blobs_recover_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let blob = |c: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        use rand::Rng;
        (0..50)
            .map(|_| vec![c + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect()
    };
    let mut data = blob(-5.0, &mut rng);
    data.extend(blob(5.0, &mut rng));
    let centroid = |s: &[Vec<f64>]| {
        [
            s.iter().map(|p| p[0]).sum::<f64>() / 50.0,
            s.iter().map(|p| p[1]).sum::<f64>() / 50.0,
        ]
    };
    let (left, right) = (centroid(&data[..50]), centroid(&data[50..]));
    let fit = gmm_fit(&data, 2, GmmConfig::default(), &mut rng).unwrap();
    let mut means = fit.model.means().to_vec();
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for (m, c) in means.iter().zip([left, right]) {
        assert!((m[0] - c[0]).abs() < 0.2 && (m[1] - c[1]).abs() < 0.2);
    }
}

#[test]
fn baselines_round_trip_through_json() {
    let data = vec![vec![0.1, 0.2], vec![0.4, 0.3], vec![0.9, 0.8]];
    let models = [
        Baseline::Parzen(ParzenModel::new(data.clone(), 1.5).unwrap()),
        Baseline::Knn(KnnModel::new(data.clone(), 1.0).unwrap()),
    ];
    for m in models {
        let back = Baseline::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
