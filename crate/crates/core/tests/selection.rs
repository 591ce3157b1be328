use dnmm::select::{
    incremental_depth_search, incremental_width_search, random_hyperparam_search, Comparability, Evaluation,
    Hyperparams, ParamRange, SearchConfig, SearchOutcome,
};
use dnmm::{Architecture, DnmmError};
use proptest::prelude::*;

/// A mock trainer replaying `values` in call order; `None` entries fail.
fn replay(values: Vec<Option<f64>>) -> impl FnMut(&Architecture, &Hyperparams, u64) -> dnmm::Result<Evaluation> {
    let mut i = 0;
    move |arch, _, _| {
        let v = values[i % values.len()];
        i += 1;
        v.map(|validation_ll| Evaluation {
            validation_ll,
            param_count: arch.param_count(1),
        })
        .ok_or_else(|| DnmmError::Input("mock failure".into()))
    }
}

fn trace() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop::option::weighted(0.85, -5.0f64..5.0), 1..12)
}

fn check_window(outcome: &SearchOutcome, config: &SearchConfig) -> Result<(), TestCaseError> {
    let done: Vec<(f64, usize)> = outcome
        .log
        .iter()
        .filter_map(|r| Some((r.validation_ll?, r.param_count?)))
        .collect();
    let shift = (1.0 - done[0].0).max(0.0);
    let window = &done[done.len().saturating_sub(config.tau + 1)..];
    let best = window.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let bound = match config.comparability {
        Comparability::Absolute(v) => v,
        Comparability::Relative(r) => r * (best + shift).abs(),
    };
    let w = &outcome.winner;
    prop_assert!(best - w.validation_ll <= bound);
    for (ll, count) in window {
        if best - ll <= bound {
            prop_assert!(w.param_count <= *count);
        }
    }
    Ok(())
}

fn config(tau: usize, nu: f64, budget: usize, comparability: Comparability) -> SearchConfig {
    SearchConfig {
        tau,
        nu,
        budget,
        comparability,
        ..SearchConfig::default()
    }
}

fn comparability() -> impl Strategy<Value = Comparability> {
    prop_oneof![
        (0.0f64..0.5).prop_map(Comparability::Absolute),
        (0.0f64..0.1).prop_map(Comparability::Relative)
    ]
}

proptest! {
    #[test]
    fn width_winner_is_comparable_and_smallest(
        values in trace(), tau in 1usize..4, nu in 0.1f64..20.0, budget in 1usize..12, comp in comparability(),
    ) {
        let cfg = config(tau, nu, budget, comp);
        match incremental_width_search(replay(values.clone()), &Architecture::new(vec![3]), &Hyperparams::new(), &cfg) {
            Ok(outcome) => check_window(&outcome, &cfg)?,
            Err(e) => {
                prop_assert!(matches!(e, DnmmError::SearchFailed));
                prop_assert!(values.iter().cycle().take(budget).all(Option::is_none));
            }
        }
    }

    #[test]
    fn depth_winner_is_comparable_and_smallest(
        values in trace(), tau in 1usize..4, nu in 0.1f64..20.0, budget in 1usize..12, comp in comparability(),
    ) {
        let cfg = config(tau, nu, budget, comp);
        if let Ok(outcome) = incremental_depth_search(replay(values), &Architecture::new(vec![3]), &Hyperparams::new(), &cfg) {
            check_window(&outcome, &cfg)?;
        }
    }

    #[test]
    fn random_search_returns_the_maximum(values in trace(), budget in 1usize..12, seed in any::<u64>()) {
        let space = [ParamRange::log("eta", 1e-4, 1e-1), ParamRange::linear("rho", 0.0, 2.0)];
        let arch = Architecture::new(vec![5]);
        if let Ok(outcome) = random_hyperparam_search(replay(values), &arch, &Hyperparams::new(), &space, budget, seed) {
            let best = outcome.log.iter().filter_map(|r| r.validation_ll).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(outcome.winner.validation_ll, best);
            for r in &outcome.log {
                let eta = r.hyperparams["eta"];
                prop_assert!((1e-4..=1e-1).contains(&eta));
            }
        }
    }

    #[test]
    fn searches_are_deterministic(seed in any::<u64>()) {
        let space = [ParamRange::linear("eta", 0.0, 1.0)];
        let arch = Architecture::new(vec![5]);
        let objective = |_: &Architecture, hp: &Hyperparams, s: u64| {
            Ok(Evaluation { validation_ll: -(hp["eta"] - 0.3).powi(2) + (s % 7) as f64 * 1e-3, param_count: 1 })
        };
        let a = random_hyperparam_search(objective, &arch, &Hyperparams::new(), &space, 20, seed).unwrap();
        let b = random_hyperparam_search(objective, &arch, &Hyperparams::new(), &space, 20, seed).unwrap();
        prop_assert_eq!(&a.winner.hyperparams, &b.winner.hyperparams);
        let strip = |o: &SearchOutcome| o.log.iter().map(|r| (r.hyperparams.clone(), r.seed, r.validation_ll)).collect::<Vec<_>>();
        prop_assert_eq!(strip(&a), strip(&b));
    }
}

#[test]
fn planted_optimum_is_found() {
    // 50 uniform draws on [0, 1] all miss [0.2, 0.4] with probability 0.8^50 < 2e-5
    let space = [ParamRange::linear("eta", 0.0, 1.0)];
    let arch = Architecture::new(vec![5]);
    for seed in 0..100 {
        let objective = |_: &Architecture, hp: &Hyperparams, _| {
            Ok(Evaluation {
                validation_ll: -(hp["eta"] - 0.3).powi(2),
                param_count: 1,
            })
        };
        let outcome = random_hyperparam_search(objective, &arch, &Hyperparams::new(), &space, 50, seed).unwrap();
        assert!((outcome.winner.hyperparams["eta"] - 0.3).abs() < 0.1, "seed {seed}");
    }
}
