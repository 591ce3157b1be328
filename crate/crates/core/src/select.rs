//! Validation-likelihood model selection: incremental width and depth growth
//! with a patience rule and MDL tie-breaking, and seeded random search over
//! training hyperparameters.
//!
//! Every search takes a `train_fn(architecture, hyperparams, seed)` that
//! trains one candidate and reports its validation mean log-likelihood.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnmmError, Result};
use crate::neural::Architecture;

pub type Hyperparams = BTreeMap<String, f64>;

/// What a trainer reports for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub validation_ll: f64,
    pub param_count: usize,
}

/// How close to the window best a likelihood must be to count as comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Comparability {
    Absolute(f64),
    /// Fraction of the window-best shifted likelihood.
    Relative(f64),
}

impl Default for Comparability {
    fn default() -> Self {
        Self::Relative(0.005)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Width increment.
    pub u: usize,
    /// Relative-gain threshold in percent.
    pub nu: f64,
    /// Consecutive sub-threshold gains before stopping.
    pub tau: usize,
    pub comparability: Comparability,
    /// Maximum number of candidates, the base included.
    pub budget: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            u: 2,
            nu: 1.0,
            tau: 2,
            comparability: Comparability::default(),
            budget: 10,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.tau == 0 || self.budget == 0 {
            return Err(DnmmError::Input("u, tau and budget must be at least 1".into()));
        }
        if !(self.nu > 0.0) {
            return Err(DnmmError::Input(format!("nu must be positive, got {}", self.nu)));
        }
        match self.comparability {
            Comparability::Absolute(v) | Comparability::Relative(v) if !(v >= 0.0) => Err(DnmmError::Input(format!(
                "comparability threshold must be nonnegative, got {v}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub architecture: Architecture,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub validation_ll: f64,
    pub param_count: usize,
    pub wall_time_s: f64,
}

/// One line of the trial log; failed trials carry the error text instead of a likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub architecture: Architecture,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub validation_ll: Option<f64>,
    pub param_count: Option<usize>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Plateau,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub winner: Candidate,
    pub stop: StopReason,
    pub log: Vec<TrialRecord>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `id,architecture,hyperparameters,seed,validation_ll,param_count,wall_time_s,error`
pub fn trial_log_csv(log: &[TrialRecord]) -> String {
    let mut out = String::from("id,architecture,hyperparameters,seed,validation_ll,param_count,wall_time_s,error\n");
    for r in log {
        let hp: Vec<String> = r.hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{}\n",
            r.id,
            csv_field(&r.architecture.describe()),
            csv_field(&hp.join(";")),
            r.seed,
            r.validation_ll.map(|v| format!("{v:e}")).unwrap_or_default(),
            r.param_count.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_time_s,
            csv_field(r.error.as_deref().unwrap_or("")),
        ));
    }
    out
}

fn trial_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_add((id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_trial<F>(
    train_fn: &mut F,
    id: usize,
    arch: &Architecture,
    hp: &Hyperparams,
    seed: u64,
) -> (TrialRecord, Option<Candidate>)
where
    F: FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation>,
{
    let start = Instant::now();
    let result = train_fn(arch, hp, seed).and_then(|e| {
        if e.validation_ll.is_nan() {
            Err(DnmmError::Input("validation likelihood is NaN".into()))
        } else {
            Ok(e)
        }
    });
    let wall = start.elapsed().as_secs_f64();
    let mut record = TrialRecord {
        id,
        architecture: arch.clone(),
        hyperparams: hp.clone(),
        seed,
        validation_ll: None,
        param_count: None,
        wall_time_s: wall,
        error: None,
    };
    match result {
        Ok(e) => {
            record.validation_ll = Some(e.validation_ll);
            record.param_count = Some(e.param_count);
            let cand = Candidate {
                id,
                architecture: arch.clone(),
                hyperparams: hp.clone(),
                seed,
                validation_ll: e.validation_ll,
                param_count: e.param_count,
                wall_time_s: wall,
            };
            (record, Some(cand))
        }
        Err(err) => {
            record.error = Some(err.to_string());
            (record, None)
        }
    }
}

/// Smallest parameter count among the window members comparable to its best.
fn mdl_pick(window: &[Candidate], shift: f64, comparability: Comparability) -> Candidate {
    let best = window.iter().map(|c| c.validation_ll).fold(f64::NEG_INFINITY, f64::max);
    let bound = match comparability {
        Comparability::Absolute(v) => v,
        Comparability::Relative(r) => r * (best + shift).abs(),
    };
    window
        .iter()
        .filter(|c| best - c.validation_ll <= bound)
        .min_by_key(|c| c.param_count)
        .expect("the window best is comparable to itself")
        .clone()
}

fn grow_search<F, G>(
    mut train_fn: F,
    base: &Architecture,
    hp: &Hyperparams,
    config: &SearchConfig,
    grow: G,
) -> Result<SearchOutcome>
where
    F: FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation>,
    G: Fn(&Architecture) -> Architecture,
{
    config.validate()?;
    let mut log = Vec::new();
    let mut done: Vec<Candidate> = Vec::new();
    let mut shift: Option<f64> = None;
    let mut low_gains = 0;
    let mut stop = StopReason::Budget;
    let mut arch = base.clone();
    for id in 0..config.budget {
        if id > 0 {
            arch = grow(&arch);
        }
        let (record, cand) = run_trial(&mut train_fn, id, &arch, hp, trial_seed(config.seed, id));
        log.push(record);
        let Some(cand) = cand else { continue };
        // the first successful candidate fixes the shift that puts it at >= 1
        let s = *shift.get_or_insert((1.0 - cand.validation_ll).max(0.0));
        if let Some(prev) = done.last() {
            let old = prev.validation_ll + s;
            let gain = (cand.validation_ll + s - old) / old.abs();
            if gain < config.nu / 100.0 {
                low_gains += 1;
            } else {
                low_gains = 0;
            }
        }
        done.push(cand);
        if low_gains >= config.tau {
            stop = StopReason::Plateau;
            break;
        }
    }
    if done.is_empty() {
        return Err(DnmmError::SearchFailed);
    }
    let window = &done[done.len().saturating_sub(config.tau + 1)..];
    let winner = mdl_pick(window, shift.unwrap_or(0.0), config.comparability);
    Ok(SearchOutcome { winner, stop, log })
}

/// Widens the last hidden layer by `u` per step.
pub fn incremental_width_search<F>(
    train_fn: F,
    base: &Architecture,
    hp: &Hyperparams,
    config: &SearchConfig,
) -> Result<SearchOutcome>
where
    F: FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation>,
{
    if base.hidden.is_empty() {
        return Err(DnmmError::Input("width search needs at least one hidden layer".into()));
    }
    let u = config.u;
    grow_search(train_fn, base, hp, config, |a| {
        let mut next = a.clone();
        *next.hidden.last_mut().expect("nonempty") += u;
        next
    })
}

/// Appends a hidden layer as wide as the current last one per step.
pub fn incremental_depth_search<F>(
    train_fn: F,
    base: &Architecture,
    hp: &Hyperparams,
    config: &SearchConfig,
) -> Result<SearchOutcome>
where
    F: FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation>,
{
    let Some(&width) = base.hidden.last() else {
        return Err(DnmmError::Input("depth search needs at least one hidden layer".into()));
    };
    grow_search(train_fn, base, hp, config, |a| {
        let mut next = a.clone();
        next.hidden.push(width);
        next
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
    #[serde(default)]
    pub integer: bool,
}

impl ParamRange {
    pub fn linear(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
            scale: Scale::Linear,
            integer: false,
        }
    }

    pub fn log(name: &str, low: f64, high: f64) -> Self {
        Self {
            scale: Scale::Log,
            ..Self::linear(name, low, high)
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.low.is_finite() && self.high.is_finite() && self.low <= self.high;
        if !ok || (self.scale == Scale::Log && !(self.low > 0.0)) {
            return Err(DnmmError::Input(format!(
                "bad range for {}: [{}, {}]",
                self.name, self.low, self.high
            )));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let v = match self.scale {
            Scale::Linear => self.low + u * (self.high - self.low),
            Scale::Log => (self.low.ln() + u * (self.high.ln() - self.low.ln())).exp(),
        };
        if self.integer {
            v.round().clamp(self.low.ceil(), self.high.floor())
        } else {
            v
        }
    }
}

/// `budget` independent draws from `space` on top of `fixed`; returns the
/// first trial with the highest validation likelihood.
pub fn random_hyperparam_search<F>(
    mut train_fn: F,
    arch: &Architecture,
    fixed: &Hyperparams,
    space: &[ParamRange],
    budget: usize,
    seed: u64,
) -> Result<SearchOutcome>
where
    F: FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation>,
{
    if space.is_empty() || budget == 0 {
        return Err(DnmmError::Input(
            "random search needs a nonempty space and budget >= 1".into(),
        ));
    }
    for r in space {
        r.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(budget);
    let mut best: Option<Candidate> = None;
    for id in 0..budget {
        let mut hp = fixed.clone();
        for r in space {
            hp.insert(r.name.clone(), r.draw(&mut rng));
        }
        let (record, cand) = run_trial(&mut train_fn, id, arch, &hp, trial_seed(seed, id));
        log.push(record);
        if let Some(c) = cand {
            if best.as_ref().is_none_or(|b| c.validation_ll > b.validation_ll) {
                best = Some(c);
            }
        }
    }
    let winner = best.ok_or(DnmmError::SearchFailed)?;
    Ok(SearchOutcome {
        winner,
        stop: StopReason::Budget,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock(values: Vec<f64>) -> impl FnMut(&Architecture, &Hyperparams, u64) -> Result<Evaluation> {
        let mut i = 0;
        move |a, _, _| {
            let v = values[i.min(values.len() - 1)];
            i += 1;
            Ok(Evaluation {
                validation_ll: v,
                param_count: a.param_count(1),
            })
        }
    }

    #[test]
    fn gain_threshold_trace() {
        let config = SearchConfig {
            u: 1,
            nu: 1.0,
            tau: 2,
            comparability: Comparability::Absolute(0.01),
            budget: 20,
            seed: 0,
        };
        let out = incremental_width_search(
            mock(vec![1.0, 1.5, 1.52, 1.521, 1.5215]),
            &Architecture::new(vec![3]),
            &Hyperparams::new(),
            &config,
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::Plateau);
        assert_eq!(out.log.len(), 5);
        // window (1.52, 1.521, 1.5215), all comparable: narrowest wins
        assert_eq!(out.winner.architecture.hidden, vec![5]);
    }

    #[test]
    fn flat_likelihood_returns_base() {
        let config = SearchConfig {
            tau: 3,
            ..SearchConfig::default()
        };
        let out = incremental_width_search(
            mock(vec![-2.0]),
            &Architecture::new(vec![4]),
            &Hyperparams::new(),
            &config,
        )
        .unwrap();
        assert_eq!(out.log.len(), 1 + 3);
        assert_eq!(out.winner.id, 0);
    }

    #[test]
    fn budget_one_is_base() {
        let config = SearchConfig {
            budget: 1,
            ..SearchConfig::default()
        };
        let out = incremental_depth_search(
            mock(vec![0.3, 9.0]),
            &Architecture::new(vec![4]),
            &Hyperparams::new(),
            &config,
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::Budget);
        assert_eq!(out.winner.architecture.hidden, vec![4]);
    }

    #[test]
    fn failures_skipped_then_search_error() {
        let config = SearchConfig {
            budget: 3,
            ..SearchConfig::default()
        };
        let fail = |_: &Architecture, _: &Hyperparams, _| -> Result<Evaluation> { Err(DnmmError::ZeroStart) };
        let err = incremental_width_search(fail, &Architecture::new(vec![2]), &Hyperparams::new(), &config);
        assert!(matches!(err, Err(DnmmError::SearchFailed)));

        let mut calls = 0;
        let flaky = |a: &Architecture, _: &Hyperparams, _| {
            calls += 1;
            if calls == 2 {
                Err(DnmmError::ZeroStart)
            } else {
                Ok(Evaluation {
                    validation_ll: 1.0,
                    param_count: a.param_count(1),
                })
            }
        };
        let out = incremental_width_search(flaky, &Architecture::new(vec![2]), &Hyperparams::new(), &config).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log[1].error.is_some());
        assert_eq!(out.winner.id, 0);
    }

    #[test]
    fn negative_likelihoods_are_shifted() {
        // shift 3.0: 1.0 → 1.2 is a 20% gain, then flat
        let config = SearchConfig {
            tau: 2,
            ..SearchConfig::default()
        };
        let out = incremental_width_search(
            mock(vec![-2.0, -1.8, -1.8, -1.8]),
            &Architecture::new(vec![1]),
            &Hyperparams::new(),
            &config,
        )
        .unwrap();
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.winner.id, 1);
    }

    #[test]
    fn random_search_single_trial() {
        let space = [ParamRange::log("eta", 1e-3, 1.0)];
        let out = random_hyperparam_search(
            mock(vec![-1.0]),
            &Architecture::new(vec![3]),
            &Hyperparams::new(),
            &space,
            1,
            4,
        )
        .unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.winner.hyperparams, out.log[0].hyperparams);
    }

    #[test]
    fn log_ranges_stay_inside() {
        let r = ParamRange::log("eta", 1e-4, 1e-1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = r.draw(&mut rng);
            assert!((1e-4..=1e-1).contains(&v));
        }
        let r = ParamRange {
            integer: true,
            ..ParamRange::linear("m", 100.0, 400.0)
        };
        let v = r.draw(&mut rng);
        assert_eq!(v, v.round());
    }

    #[test]
    fn csv_header_and_quoting() {
        let config = SearchConfig {
            budget: 2,
            ..SearchConfig::default()
        };
        let mut hp = Hyperparams::new();
        hp.insert("eta".into(), 0.5);
        hp.insert("rho".into(), 1.0);
        let out = incremental_width_search(mock(vec![1.0, 2.0]), &Architecture::new(vec![3]), &hp, &config).unwrap();
        let csv = trial_log_csv(&out.log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,architecture,hyperparameters,seed,validation_ll,param_count,wall_time_s,error"
        );
        assert!(lines.next().unwrap().starts_with("0,3:adaptive,eta=0.5;rho=1,"));
    }
}
