use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dnmm::select::{
    incremental_depth_search, incremental_width_search, random_hyperparam_search, trial_log_csv, Candidate, Evaluation,
    Hyperparams, SearchOutcome, StopReason,
};
use dnmm::{Architecture, Dnmm, DnmmError, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SelectionSpec, Strategy, SCHEMA_VERSION};
use crate::dataset::{generate, read_dataset, write_dataset, write_file, Dataset};
use crate::error::{CliError, Result};
use crate::estimators::{fit_roster, mean_log_likelihood, save_run, train_dnmm, Fitted, Manifest, Split};
use crate::normalize::AffineMap;
use crate::report::{build_report, curves_dat, evaluate_run, write_report, ExperimentReport};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const CURVE_POINTS: usize = 1001;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    write_file(path, json.as_bytes())
}

/// Writes the train and validation files and a config echo into `dir`.
pub fn gen_data(config: &ExperimentConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train, validation) = generate(config)?;
    write_dataset(&dir.join(TRAIN_FILE), &train)?;
    write_dataset(&dir.join(VALIDATION_FILE), &validation)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    Ok((train, validation))
}

/// Loads `--config` if given, else the echo stored in the run directory.
pub fn resolve_config(explicit: Option<&Path>, run: &Path) -> Result<ExperimentConfig> {
    match explicit {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::load(&run.join(CONFIG_FILE)),
    }
}

struct RunData {
    train: Dataset,
    validation: Dataset,
    domain: dnmm::DomainBox,
    map: AffineMap,
}

impl RunData {
    fn load(config: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let train = read_dataset(&dir.join(TRAIN_FILE))?;
        let validation = read_dataset(&dir.join(VALIDATION_FILE))?;
        let d = config.task.dim();
        for (name, data) in [(TRAIN_FILE, &train), (VALIDATION_FILE, &validation)] {
            if data.dim() != d {
                return Err(CliError::Config(format!(
                    "{name} has {} columns but the task has dimension {d}",
                    data.dim()
                )));
            }
        }
        let domain = config.domain();
        let map = AffineMap::fit(&train.rows, &domain, config.normalization)?;
        Ok(Self {
            train,
            validation,
            domain,
            map,
        })
    }

    fn split(&self) -> Split<'_> {
        Split {
            train: &self.train.rows,
            validation: &self.validation.rows,
            domain: &self.domain,
            map: &self.map,
        }
    }
}

/// Fits the roster on the run's data and stores everything in the run directory.
pub fn train(config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let data = RunData::load(config, dir)?;
    let split = data.split();
    let outcomes = fit_roster(config, &split)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    save_run(dir, &split, &outcomes)
}

/// Scores each run and writes the combined report to `out`.
pub fn evaluate(runs: &[PathBuf], config: Option<&Path>, out: &Path) -> Result<ExperimentReport> {
    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let config = resolve_config(config, run)?;
        reports.push(evaluate_run(run, &config)?);
        if let Some(dat) = curves_dat(run, &config, CURVE_POINTS)? {
            let name = reports.last().map_or("run", |r| r.run.as_str()).to_string();
            write_file(&out.join("curves").join(format!("{name}.dat")), dat.as_bytes())?;
        }
    }
    let report = build_report(reports);
    write_report(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub stop: StopReason,
    pub winner: Candidate,
    pub settings: SelectionSpec,
}

/// Runs the configured DNMM search and writes its log and the winning model to `out`.
pub fn select(config: &ExperimentConfig, run: &Path, out: &Path) -> Result<SelectionReport> {
    let data = RunData::load(config, run)?;
    let split = data.split();
    let mapped = split.mapped_train();
    let spec = &config.selection;
    let trained: Mutex<BTreeMap<u64, (Dnmm, TrainConfig)>> = Mutex::new(BTreeMap::new());
    let train_fn = |arch: &Architecture, hp: &Hyperparams, seed: u64| -> dnmm::Result<Evaluation> {
        let mut candidate = spec
            .dnmm
            .with_hyperparams(hp)
            .map_err(|e| DnmmError::Input(e.to_string()))?;
        candidate.hidden = arch.hidden.clone();
        let (model, _, train_config) = train_dnmm(&candidate, seed, &mapped, split.domain).map_err(|e| match e {
            CliError::Core(c) => c,
            other => DnmmError::Input(other.to_string()),
        })?;
        let fitted = Fitted::Dnmm {
            model,
            map: split.map.clone(),
        };
        let (ll, _) = mean_log_likelihood(&fitted, split.validation)?;
        let param_count = fitted.param_count();
        if let Fitted::Dnmm { model, .. } = fitted {
            trained.lock().expect("unpoisoned").insert(seed, (model, train_config));
        }
        Ok(Evaluation {
            validation_ll: ll,
            param_count,
        })
    };
    let base = spec.dnmm.architecture();
    let outcome: SearchOutcome = match spec.strategy {
        Strategy::Width => incremental_width_search(train_fn, &base, &Hyperparams::new(), &spec.search)?,
        Strategy::Depth => incremental_depth_search(train_fn, &base, &Hyperparams::new(), &spec.search)?,
        Strategy::Random => random_hyperparam_search(
            train_fn,
            &base,
            &Hyperparams::new(),
            &spec.space,
            spec.search.budget,
            spec.search.seed,
        )?,
    };
    let (model, train_config) = trained
        .into_inner()
        .expect("unpoisoned")
        .remove(&outcome.winner.seed)
        .expect("winner was trained");
    write_file(&out.join("winner.json"), model.to_json(Some(&train_config))?.as_bytes())?;
    write_file(&out.join("trials.csv"), trial_log_csv(&outcome.log).as_bytes())?;
    let report = SelectionReport {
        schema_version: SCHEMA_VERSION,
        strategy: spec.strategy,
        stop: outcome.stop,
        winner: outcome.winner,
        settings: spec.clone(),
    };
    write_json(&out.join("selection.json"), &report)?;
    Ok(report)
}

/// Reads a JSON file into `T`, reporting parse failures against the path.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}
