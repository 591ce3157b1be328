use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dnmm::eval::{self, IseMethod, IseResult};
use dnmm::synth::TargetDensity;
use dnmm::DomainBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvaluationSpec, ExperimentConfig, SCHEMA_VERSION};
use crate::dataset::{read_dataset, write_file};
use crate::error::{CliError, Result};
use crate::estimators::{derive_seed, load_run, mean_log_likelihood, Family, Fitted, Outcome};

/// Stream index reserved for the shared Monte Carlo ISE points of a run.
const ISE_STREAM: u64 = u64::MAX;
/// Simpson nodes per axis for the mixture integral check.
const INTEGRAL_NODES: [usize; 2] = [4001, 401];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: String,
    pub family: Family,
    pub status: Status,
    pub validation_ll: Option<f64>,
    /// Validation points whose density fell below the likelihood floor.
    pub floored: Option<usize>,
    pub ise: Option<IseResult>,
    /// Integral of the mixture over its domain, for DNMMs with `d <= 2`.
    pub integral: Option<f64>,
    /// ISE reduction against the run's baseline, in percent.
    pub reduction_pct: Option<f64>,
    pub param_count: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub task: Option<String>,
    pub dim: usize,
    /// The statistical estimator with the highest validation likelihood.
    pub baseline: Option<String>,
    pub rows: Vec<EstimatorRow>,
}

impl RunReport {
    pub fn row(&self, name: &str) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == name)
    }
}

/// Welch's test of an estimator's ISE against the per-run baseline ISE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchRow {
    pub estimator: String,
    pub runs: usize,
    pub mean_ise: f64,
    pub mean_baseline_ise: f64,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub runs: Vec<RunReport>,
    pub welch: Vec<WelchRow>,
}

/// Picks the statistical estimator with the highest validation likelihood.
/// Ties go to the earlier row.
pub fn pick_baseline(rows: &[EstimatorRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        let Some(ll) = r.validation_ll.filter(|v| v.is_finite()) else {
            continue;
        };
        if r.family.is_statistical() && r.status == Status::Ok && best.is_none_or(|(_, b)| ll > b) {
            best = Some((i, ll));
        }
    }
    best.map(|(i, _)| i)
}

/// Scores every estimator of a trained run directory.
pub fn evaluate_run(dir: &Path, config: &ExperimentConfig) -> Result<RunReport> {
    let validation = read_dataset(&dir.join("validation.csv"))?;
    let (manifest, outcomes) = load_run(dir)?;
    let dim = manifest.domain.dim();
    if validation.dim() != dim {
        return Err(CliError::format(
            &dir.join("validation.csv"),
            "dimension does not match the run",
        ));
    }
    let target = validation.target();
    let region = manifest.normalization.preimage(&manifest.domain)?;
    let ise_seed = derive_seed(config.seed, &[ISE_STREAM]);
    let mut rows: Vec<EstimatorRow> = outcomes
        .par_iter()
        .map(|o| score(o, &validation.rows, target, &region, &config.evaluation, ise_seed))
        .collect();
    let baseline = pick_baseline(&rows);
    if let Some(b) = baseline {
        if let Some(base) = rows[b].ise {
            for r in &mut rows {
                r.reduction_pct = r.ise.and_then(|ise| eval::relative_ise_reduction(&base, &ise).ok());
            }
        }
    }
    Ok(RunReport {
        run: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        task: validation.generator.as_ref().map(|g| g.task.label()),
        dim,
        baseline: baseline.map(|b| rows[b].estimator.clone()),
        rows,
    })
}

fn score(
    o: &Outcome,
    validation: &[Vec<f64>],
    target: Option<&TargetDensity>,
    region: &DomainBox,
    spec: &EvaluationSpec,
    ise_seed: u64,
) -> EstimatorRow {
    let mut row = EstimatorRow {
        estimator: o.name.clone(),
        family: o.family,
        status: Status::Failed,
        validation_ll: None,
        floored: None,
        ise: None,
        integral: None,
        reduction_pct: None,
        param_count: None,
        error: None,
    };
    let est = match &o.result {
        Ok(est) => est,
        Err(e) => {
            row.error = Some(e.clone());
            return row;
        }
    };
    let f = &est.fitted;
    let result = (|| -> Result<()> {
        let (ll, floored) = mean_log_likelihood(f, validation)?;
        row.validation_ll = Some(ll);
        row.floored = Some(floored);
        row.param_count = Some(f.param_count());
        if let Some(t) = target {
            row.ise = Some(ise(f, t, region, spec, ise_seed)?);
        }
        if let Fitted::Dnmm { model, .. } = f {
            if let Some(&nodes) = INTEGRAL_NODES.get(model.dim() - 1) {
                let z = eval::simpson_tensor(|y| model.mixture_density(y).unwrap_or(f64::NAN), model.domain(), nodes)?;
                row.integral = Some(z);
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => row.status = Status::Ok,
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Simpson on the padded interval for `d = 1`, Monte Carlo on `region` otherwise.
/// `region` is the model domain in data coordinates.
pub fn ise(
    f: &Fitted,
    target: &TargetDensity,
    region: &DomainBox,
    spec: &EvaluationSpec,
    seed: u64,
) -> Result<IseResult> {
    let truth = |x: &[f64]| target.pdf(x).unwrap_or(f64::NAN);
    let result = if region.dim() == 1 {
        let (lo, hi) = (region.lower()[0], region.upper()[0]);
        let pad = spec.padding * (hi - lo);
        eval::ise_simpson_1d(
            |x| f.density(&[x]),
            |x| truth(&[x]),
            lo - pad,
            hi + pad,
            spec.simpson_nodes,
        )?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        eval::ise_mc(|x| f.density(x), truth, region, spec.mc_samples, &mut rng)?
    };
    if !result.value.is_finite() {
        return Err(CliError::Core(dnmm::DnmmError::Input("ISE is not finite".into())));
    }
    Ok(result)
}

/// Welch's test per estimator over runs, pairing each ISE with its run's baseline ISE.
pub fn welch_rows(runs: &[RunReport]) -> Vec<WelchRow> {
    let mut per: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for run in runs {
        let Some(base) = run.baseline.as_deref().and_then(|b| run.row(b)).and_then(|r| r.ise) else {
            continue;
        };
        for r in &run.rows {
            if let Some(ise) = r.ise {
                let e = per.entry(&r.estimator).or_insert_with(|| {
                    order.push(&r.estimator);
                    Default::default()
                });
                e.0.push(ise.value);
                e.1.push(base.value);
            }
        }
    }
    order
        .into_iter()
        .map(|name| {
            let (a, b) = &per[name];
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let mut row = WelchRow {
                estimator: name.to_string(),
                runs: a.len(),
                mean_ise: mean(a),
                mean_baseline_ise: mean(b),
                t: None,
                df: None,
                p_value: None,
                note: None,
            };
            match eval::welch_t_test(a, b) {
                Ok(w) => {
                    row.t = Some(w.t);
                    row.df = Some(w.df);
                    row.p_value = Some(w.p_value);
                }
                Err(e) => row.note = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn build_report(runs: Vec<RunReport>) -> ExperimentReport {
    let welch = welch_rows(&runs);
    ExperimentReport {
        schema_version: SCHEMA_VERSION,
        runs,
        welch,
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "run,task,estimator,family,status,baseline,validation_ll,floored,ise,ise_method,ise_count,ise_std_error,integral,reduction_pct,param_count,error\n",
    );
    for run in &report.runs {
        for r in &run.rows {
            let method = r.ise.map(|i| match i.method {
                IseMethod::Simpson => "simpson",
                IseMethod::MonteCarlo => "monte-carlo",
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                quote(&run.run),
                quote(&opt(run.task.as_ref())),
                quote(&r.estimator),
                serde_json::to_value(r.family)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                if r.status == Status::Ok { "ok" } else { "failed" },
                run.baseline.as_deref() == Some(r.estimator.as_str()),
                opt(r.validation_ll),
                opt(r.floored),
                opt(r.ise.map(|i| i.value)),
                opt(method),
                opt(r.ise.map(|i| i.count)),
                opt(r.ise.and_then(|i| i.std_error)),
                opt(r.integral),
                opt(r.reduction_pct),
                opt(r.param_count),
                quote(&opt(r.error.as_ref())),
            );
        }
    }
    out
}

pub fn welch_csv(rows: &[WelchRow]) -> String {
    let mut out = String::from("estimator,runs,mean_ise,mean_baseline_ise,t,df,p_value,note\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            quote(&r.estimator),
            r.runs,
            r.mean_ise,
            r.mean_baseline_ise,
            opt(r.t),
            opt(r.df),
            opt(r.p_value),
            quote(&opt(r.note.as_ref()))
        );
    }
    out
}

/// Gnuplot-ready columns `x target <estimators...>` on an even grid over the padded domain.
pub fn curves_dat(dir: &Path, config: &ExperimentConfig, points: usize) -> Result<Option<String>> {
    let validation = read_dataset(&dir.join("validation.csv"))?;
    let (manifest, outcomes) = load_run(dir)?;
    if manifest.domain.dim() != 1 || points < 2 {
        return Ok(None);
    }
    let fitted: Vec<(&str, &Fitted)> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().map(|e| (o.name.as_str(), &e.fitted)))
        .collect();
    let region = manifest.normalization.preimage(&manifest.domain)?;
    let (lo, hi) = (region.lower()[0], region.upper()[0]);
    let pad = config.evaluation.padding * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    let mut out = String::from("# x target");
    for (name, _) in &fitted {
        out.push(' ');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..points {
        let x = a + (b - a) * i as f64 / (points - 1) as f64;
        let truth = validation
            .target()
            .map_or(f64::NAN, |t| t.pdf(&[x]).unwrap_or(f64::NAN));
        let _ = write!(out, "{x} {truth}");
        for (_, f) in &fitted {
            let _ = write!(out, " {}", f.density(&[x]));
        }
        out.push('\n');
    }
    Ok(Some(out))
}

/// Writes `report.json`, `report.csv` and `welch.csv` under `out`.
pub fn write_report(out: &Path, report: &ExperimentReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::format(out, e))?;
    write_file(&out.join("report.json"), json.as_bytes())?;
    write_file(&out.join("report.csv"), report_csv(report).as_bytes())?;
    write_file(&out.join("welch.csv"), welch_csv(&report.welch).as_bytes())
}
