use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use dnmm::baselines::{gmm_fit, GmmConfig};
use dnmm::eval;
use dnmm::select::{random_hyperparam_search, trial_log_csv, Evaluation, Hyperparams, ParamRange, TrialRecord};
use dnmm::{Baseline, Dnmm, DomainBox, InitConfig, KnnModel, ParzenModel, Trace, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DnmmSpec, ExperimentConfig, Tuned, SCHEMA_VERSION};
use crate::dataset::write_file;
use crate::error::{CliError, Result};
use crate::normalize::AffineMap;

/// splitmix64 over `(seed, parts...)`, one independent stream per cell.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for (i, p) in parts.iter().enumerate() {
        z = z
            .wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .rotate_left(17 + i as u32);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Dnmm,
    Gmm,
    Parzen,
    Knn,
}

impl Family {
    pub fn is_statistical(self) -> bool {
        self != Family::Dnmm
    }
}

/// A fitted estimator evaluated in data coordinates.
#[derive(Debug, Clone)]
pub enum Fitted {
    Dnmm { model: Dnmm, map: AffineMap },
    Baseline(Baseline),
}

impl Fitted {
    pub fn family(&self) -> Family {
        match self {
            Fitted::Dnmm { .. } => Family::Dnmm,
            Fitted::Baseline(Baseline::Gmm(_)) => Family::Gmm,
            Fitted::Baseline(Baseline::Parzen(_)) => Family::Parzen,
            Fitted::Baseline(Baseline::Knn(_)) => Family::Knn,
        }
    }

    /// Density at a data-space point. A DNMM is zero outside its domain.
    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Fitted::Dnmm { model, map } => {
                let y = map.apply(x);
                if !model.domain().contains(&y) {
                    return 0.0;
                }
                model.mixture_density(&y).map_or(f64::NAN, |p| p * map.jacobian())
            }
            Fitted::Baseline(b) => b.pdf(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Fitted::Dnmm { model, .. } => model.param_count(),
            Fitted::Baseline(Baseline::Gmm(g)) => g.param_count(),
            Fitted::Baseline(Baseline::Parzen(p)) => p.sample().len() * p.dim() + 1,
            Fitted::Baseline(Baseline::Knn(k)) => k.sample().len() * k.dim() + 1,
        }
    }

    pub fn to_json(&self, config: Option<&TrainConfig>) -> Result<String> {
        Ok(match self {
            Fitted::Dnmm { model, .. } => model.to_json(config)?,
            Fitted::Baseline(b) => b.to_json()?,
        })
    }
}

/// Floored mean log-likelihood of `data` and how many points hit the floor.
pub fn mean_log_likelihood(f: &Fitted, data: &[Vec<f64>]) -> dnmm::Result<(f64, usize)> {
    let ll = eval::mean_log_likelihood(|x| f.density(x), data)?;
    Ok((ll.mean, ll.floored))
}

#[derive(Debug, Clone)]
pub struct TrainedEstimator {
    pub name: String,
    pub fitted: Fitted,
    pub seed: u64,
    pub trace: Option<Trace>,
    pub train_config: Option<TrainConfig>,
    /// Values picked by validation likelihood, if any were searched.
    pub hyperparams: Hyperparams,
    pub trials: Vec<TrialRecord>,
    pub train_time_s: f64,
}

/// One roster entry: its fit, or the reason it failed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub family: Family,
    pub seed: u64,
    pub result: std::result::Result<TrainedEstimator, String>,
}

/// The data an experiment trains on, in data coordinates.
pub struct Split<'a> {
    pub train: &'a [Vec<f64>],
    pub validation: &'a [Vec<f64>],
    pub domain: &'a DomainBox,
    pub map: &'a AffineMap,
}

impl Split<'_> {
    /// Training points mapped into the domain; points that land outside are dropped.
    pub fn mapped_train(&self) -> Vec<Vec<f64>> {
        self.train
            .iter()
            .map(|x| self.map.apply(x))
            .filter(|y| self.domain.contains(y))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Job {
    Dnmm(DnmmSpec),
    Gmm(usize),
    Parzen(Tuned),
    Knn(Tuned),
}

impl Job {
    fn name(&self) -> String {
        match self {
            Job::Dnmm(s) => s.label(),
            Job::Gmm(k) => format!("{k}-gmm"),
            Job::Parzen(_) => "pw".into(),
            Job::Knn(_) => "knn".into(),
        }
    }

    fn family(&self) -> Family {
        match self {
            Job::Dnmm(_) => Family::Dnmm,
            Job::Gmm(_) => Family::Gmm,
            Job::Parzen(_) => Family::Parzen,
            Job::Knn(_) => Family::Knn,
        }
    }
}

fn jobs(config: &ExperimentConfig) -> Vec<Job> {
    let r = &config.roster;
    let mut jobs: Vec<Job> = r.gmm.iter().map(|&k| Job::Gmm(k)).collect();
    jobs.extend(r.knn.map(Job::Knn));
    jobs.extend(r.parzen.map(Job::Parzen));
    jobs.extend(r.dnmm.iter().cloned().map(Job::Dnmm));
    jobs
}

/// Fits every roster entry in parallel. Entry `i` draws from the stream
/// `derive_seed(config.seed, [i])`, so results do not depend on scheduling.
pub fn fit_roster(config: &ExperimentConfig, split: &Split) -> Result<Vec<Outcome>> {
    let jobs = jobs(config);
    let mut names: Vec<String> = jobs.iter().map(Job::name).collect();
    names.sort();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::Config(format!("duplicate estimator name {:?}", w[0])));
    }
    Ok(jobs
        .into_par_iter()
        .enumerate()
        .map(|(i, job)| {
            let seed = derive_seed(config.seed, &[i as u64]);
            let name = job.name();
            let family = job.family();
            let result = fit_job(&job, &name, seed, split).map_err(|e| e.to_string());
            Outcome {
                name,
                family,
                seed,
                result,
            }
        })
        .collect())
}

fn fit_job(job: &Job, name: &str, seed: u64, split: &Split) -> Result<TrainedEstimator> {
    let start = Instant::now();
    let mut est = match job {
        Job::Gmm(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fit = gmm_fit(split.train, *k, GmmConfig::default(), &mut rng)?;
            plain(name, seed, Fitted::Baseline(Baseline::Gmm(fit.model)))
        }
        Job::Parzen(t) => fit_tuned(name, seed, split, *t, "h1", |s, v| {
            Ok(Baseline::Parzen(ParzenModel::new(s.to_vec(), v)?))
        })?,
        Job::Knn(t) => fit_tuned(name, seed, split, *t, "k1", |s, v| {
            Ok(Baseline::Knn(KnnModel::new(s.to_vec(), v)?))
        })?,
        Job::Dnmm(spec) => fit_dnmm(name, spec, seed, split)?,
    };
    est.train_time_s = start.elapsed().as_secs_f64();
    Ok(est)
}

fn plain(name: &str, seed: u64, fitted: Fitted) -> TrainedEstimator {
    TrainedEstimator {
        name: name.to_string(),
        fitted,
        seed,
        trace: None,
        train_config: None,
        hyperparams: Hyperparams::new(),
        trials: Vec::new(),
        train_time_s: 0.0,
    }
}

fn fit_tuned<B>(name: &str, seed: u64, split: &Split, tuned: Tuned, key: &str, build: B) -> Result<TrainedEstimator>
where
    B: Fn(&[Vec<f64>], f64) -> dnmm::Result<Baseline>,
{
    let (low, high, trials) = match tuned {
        Tuned::Fixed { value } => return Ok(plain(name, seed, Fitted::Baseline(build(split.train, value)?))),
        Tuned::Search { low, high, trials } => (low, high, trials),
    };
    let arch = dnmm::Architecture::new(vec![1]);
    let outcome = random_hyperparam_search(
        |_, hp: &Hyperparams, _| {
            let fitted = Fitted::Baseline(build(split.train, hp[key])?);
            let (ll, _) = mean_log_likelihood(&fitted, split.validation)?;
            Ok(Evaluation {
                validation_ll: ll,
                param_count: fitted.param_count(),
            })
        },
        &arch,
        &Hyperparams::new(),
        &[ParamRange::log(key, low, high)],
        trials,
        seed,
    )?;
    let value = outcome.winner.hyperparams[key];
    let mut est = plain(name, seed, Fitted::Baseline(build(split.train, value)?));
    est.hyperparams = outcome.winner.hyperparams;
    est.trials = outcome.log;
    Ok(est)
}

/// Initializes and trains one DNMM in model coordinates.
pub fn train_dnmm(
    spec: &DnmmSpec,
    seed: u64,
    data: &[Vec<f64>],
    domain: &DomainBox,
) -> Result<(Dnmm, Trace, TrainConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Dnmm::new(
        domain.clone(),
        spec.k,
        &spec.architecture(),
        InitConfig {
            half_width: spec.half_width,
        },
        spec.init_points,
        &mut rng,
    )?;
    let config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let trace = model.train(data, &config)?;
    Ok((model, trace, config))
}

fn fit_dnmm(name: &str, spec: &DnmmSpec, seed: u64, split: &Split) -> Result<TrainedEstimator> {
    let data = split.mapped_train();
    let Some(search) = &spec.search else {
        let (model, trace, config) = train_dnmm(spec, seed, &data, split.domain)?;
        let mut est = plain(
            name,
            seed,
            Fitted::Dnmm {
                model,
                map: split.map.clone(),
            },
        );
        est.trace = Some(trace);
        est.train_config = Some(config);
        return Ok(est);
    };
    // keep every trained candidate so the winner need not be retrained
    let trained: Mutex<BTreeMap<u64, (Dnmm, Trace, TrainConfig)>> = Mutex::new(BTreeMap::new());
    let outcome = random_hyperparam_search(
        |_, hp: &Hyperparams, s| {
            let candidate = spec
                .with_hyperparams(hp)
                .map_err(|e| dnmm::DnmmError::Input(e.to_string()))?;
            let (model, trace, config) = train_dnmm(&candidate, s, &data, split.domain).map_err(|e| match e {
                CliError::Core(c) => c,
                other => dnmm::DnmmError::Input(other.to_string()),
            })?;
            let fitted = Fitted::Dnmm {
                model,
                map: split.map.clone(),
            };
            let (ll, _) = mean_log_likelihood(&fitted, split.validation)?;
            let count = fitted.param_count();
            let Fitted::Dnmm { model, .. } = fitted else {
                unreachable!()
            };
            trained.lock().expect("unpoisoned").insert(s, (model, trace, config));
            Ok(Evaluation {
                validation_ll: ll,
                param_count: count,
            })
        },
        &spec.architecture(),
        &Hyperparams::new(),
        &search.space,
        search.budget,
        seed,
    )?;
    let (model, trace, config) = trained
        .into_inner()
        .expect("unpoisoned")
        .remove(&outcome.winner.seed)
        .expect("winner was trained");
    let mut est = plain(
        name,
        outcome.winner.seed,
        Fitted::Dnmm {
            model,
            map: split.map.clone(),
        },
    );
    est.trace = Some(trace);
    est.train_config = Some(config);
    est.hyperparams = outcome.winner.hyperparams;
    est.trials = outcome.log;
    Ok(est)
}

/// Index of a trained run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub domain: DomainBox,
    pub normalization: AffineMap,
    /// Training points dropped for falling outside the domain.
    pub dropped_train: usize,
    pub estimators: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub family: Family,
    pub seed: u64,
    /// Model file relative to the run directory; absent when training failed.
    pub model: Option<String>,
    pub hyperparams: Hyperparams,
    pub error: Option<String>,
}

/// Writes models, traces, trial logs, timings and the manifest under `dir`.
pub fn save_run(dir: &Path, split: &Split, outcomes: &[Outcome]) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut timings = String::from("estimator,train_time_s\n");
    for o in outcomes {
        let mut entry = ManifestEntry {
            name: o.name.clone(),
            family: o.family,
            seed: o.seed,
            model: None,
            hyperparams: Hyperparams::new(),
            error: None,
        };
        match &o.result {
            Ok(est) => {
                let rel = format!("models/{}.json", o.name);
                write_file(
                    &dir.join(&rel),
                    est.fitted.to_json(est.train_config.as_ref())?.as_bytes(),
                )?;
                if let Some(trace) = &est.trace {
                    write_file(&dir.join(format!("traces/{}.csv", o.name)), trace.to_csv().as_bytes())?;
                }
                if !est.trials.is_empty() {
                    write_file(
                        &dir.join(format!("trials/{}.csv", o.name)),
                        trial_log_csv(&est.trials).as_bytes(),
                    )?;
                }
                timings.push_str(&format!("{},{}\n", o.name, est.train_time_s));
                entry.model = Some(rel);
                entry.seed = est.seed;
                entry.hyperparams = est.hyperparams.clone();
            }
            Err(e) => entry.error = Some(e.clone()),
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        domain: split.domain.clone(),
        normalization: split.map.clone(),
        dropped_train: split.train.len() - split.mapped_train().len(),
        estimators: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::format(dir, e))?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    write_file(&dir.join("timings.csv"), timings.as_bytes())?;
    Ok(manifest)
}

/// Reads a run directory back into outcomes, in manifest order.
pub fn load_run(dir: &Path) -> Result<(Manifest, Vec<Outcome>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))?;
    let mut outcomes = Vec::new();
    for entry in &manifest.estimators {
        let result = match (&entry.model, &entry.error) {
            (Some(rel), _) => {
                let p = dir.join(rel);
                let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                let (fitted, config) = if entry.family == Family::Dnmm {
                    let (model, config) = Dnmm::from_json(&text).map_err(|e| CliError::format(&p, e))?;
                    (
                        Fitted::Dnmm {
                            model,
                            map: manifest.normalization.clone(),
                        },
                        config,
                    )
                } else {
                    (
                        Fitted::Baseline(Baseline::from_json(&text).map_err(|e| CliError::format(&p, e))?),
                        None,
                    )
                };
                let mut est = plain(&entry.name, entry.seed, fitted);
                est.train_config = config;
                est.hyperparams = entry.hyperparams.clone();
                Ok(est)
            }
            (None, e) => Err(e.clone().unwrap_or_else(|| "no model file".into())),
        };
        outcomes.push(Outcome {
            name: entry.name.clone(),
            family: entry.family,
            seed: entry.seed,
            result,
        });
    }
    Ok((manifest, outcomes))
}
