use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dnmm::select::ParamRange;
use serde::{Deserialize, Serialize};

use crate::commands::{gen_data, train};
use crate::config::{DnmmSearch, DnmmSpec, ExperimentConfig, TaskSpec, Tuned, SCHEMA_VERSION};
use crate::dataset::write_file;
use crate::error::{CliError, Result};
use crate::report::{build_report, evaluate_run, report_csv, welch_csv, ExperimentReport, Status};

/// Reference ISE per estimator for `c = 5, 10, 15, 20`.
pub const TABLE1_C: [usize; 4] = [5, 10, 15, 20];
pub const TABLE1_REFERENCE: [(&str, [f64; 4]); 8] = [
    ("8-gmm", [9.60e-3, 1.12e-2, 4.57e-2, 7.99e-2]),
    ("16-gmm", [6.33e-3, 9.29e-3, 3.78e-2, 4.24e-2]),
    ("32-gmm", [7.15e-3, 9.82e-3, 2.41e-2, 3.03e-2]),
    ("knn", [6.54e-3, 8.70e-3, 2.03e-2, 2.36e-2]),
    ("pw", [6.02e-3, 8.94e-3, 2.14e-2, 1.98e-2]),
    ("4-dnmm", [6.41e-3, 7.06e-3, 1.09e-2, 1.40e-2]),
    ("8-dnmm", [5.89e-3, 6.02e-3, 8.11e-3, 1.01e-2]),
    ("12-dnmm", [6.38e-3, 6.27e-3, 8.05e-3, 9.64e-3]),
];

/// Reference DNMM ISE reduction (%) over the best statistical estimator,
/// by dimension and total component count.
pub const TABLE2_D: [usize; 4] = [2, 4, 6, 8];
pub const TABLE2_CT: [usize; 4] = [4, 9, 16, 25];
pub const TABLE2_REFERENCE: [[f64; 4]; 4] = [
    [11.31, 10.52, 7.38, 9.02],
    [8.44, -0.07, 5.75, 7.01],
    [4.98, -1.64, 5.80, 8.13],
    [6.20, 7.34, 8.63, 8.00],
];
/// Name of the searched DNMM in the multivariate roster.
pub const TABLE2_DNMM: &str = "dnmm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Clone)]
pub struct ReplicateOptions {
    pub table: Table,
    pub seeds: usize,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    /// Trials for every searched estimator.
    pub search_budget: Option<usize>,
    /// All dimensions and component counts instead of `d = 2, C_T in {4, 9}`.
    pub full_grid: bool,
}

impl ReplicateOptions {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(CliError::Config("--seeds must be at least 1".into()));
        }
        if self.epochs == Some(0) || self.search_budget == Some(0) {
            return Err(CliError::Config(
                "--epochs and --search-budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One experimental condition, run once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub d: usize,
    /// `c` for the univariate task, `C_T` for the multivariate one.
    pub components: usize,
    pub config: ExperimentConfig,
}

fn default_search_budget() -> usize {
    10
}

/// The multivariate roster: GMMs, searched kernel widths and one searched DNMM.
pub fn table2_config(d: usize, c: usize, budget: usize) -> ExperimentConfig {
    let task = TaskSpec::MGev { d, c };
    let mut config = ExperimentConfig::for_task(task.clone());
    let searched = Tuned::Search {
        low: 0.1,
        high: 10.0,
        trials: budget,
    };
    config.roster.gmm = vec![4, 8, 16, 32];
    config.roster.parzen = Some(searched);
    config.roster.knn = Some(searched);
    config.roster.dnmm = vec![DnmmSpec {
        name: Some(TABLE2_DNMM.into()),
        search: Some(DnmmSearch {
            budget,
            space: vec![
                ParamRange::log("eta", 1e-3, 1e-2),
                ParamRange::log("rho", 0.1, 10.0),
                ParamRange {
                    integer: true,
                    ..ParamRange::linear("k", 2.0, 12.0)
                },
            ],
        }),
        ..DnmmSpec::for_task(&task)
    }];
    config
}

/// Integer `c` with `c^d = total`, if any.
pub fn per_axis_count(total: usize, d: usize) -> Option<usize> {
    (1..=total).find(|c| c.checked_pow(d as u32) == Some(total))
}

/// The cells to run and the grid points skipped because `C_T` is not a `d`-th power.
pub fn cells(opts: &ReplicateOptions) -> (Vec<Cell>, Vec<(usize, usize)>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    match opts.table {
        Table::One => {
            for c in TABLE1_C {
                cells.push(Cell {
                    label: format!("c{c}"),
                    d: 1,
                    components: c,
                    config: ExperimentConfig::for_task(TaskSpec::FisherTippett { c }),
                });
            }
        }
        Table::Two => {
            let budget = opts.search_budget.unwrap_or_else(default_search_budget);
            let (ds, cts): (&[usize], &[usize]) = if opts.full_grid {
                (&TABLE2_D, &TABLE2_CT)
            } else {
                (&[2], &[4, 9])
            };
            for &d in ds {
                for &ct in cts {
                    match per_axis_count(ct, d) {
                        Some(c) => cells.push(Cell {
                            label: format!("d{d}-ct{ct}"),
                            d,
                            components: ct,
                            config: table2_config(d, c, budget),
                        }),
                        None => skipped.push((d, ct)),
                    }
                }
            }
        }
    }
    for cell in &mut cells {
        let roster = &mut cell.config.roster;
        if let Some(epochs) = opts.epochs {
            for spec in &mut roster.dnmm {
                spec.train.epochs = epochs;
            }
        }
        if let (Some(b), Table::One) = (opts.search_budget, opts.table) {
            for spec in &mut roster.dnmm {
                if let Some(s) = &mut spec.search {
                    s.budget = b;
                }
            }
        }
    }
    (cells, skipped)
}

pub fn reference_ise(c: usize, estimator: &str) -> Option<f64> {
    let col = TABLE1_C.iter().position(|&x| x == c)?;
    TABLE1_REFERENCE
        .iter()
        .find(|(n, _)| *n == estimator)
        .map(|(_, v)| v[col])
}

pub fn reference_reduction(d: usize, ct: usize) -> Option<f64> {
    let row = TABLE2_D.iter().position(|&x| x == d)?;
    let col = TABLE2_CT.iter().position(|&x| x == ct)?;
    Some(TABLE2_REFERENCE[row][col])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub d: usize,
    pub components: usize,
    pub estimator: String,
    pub runs: usize,
    pub failed: usize,
    /// Runs in which this estimator was the baseline.
    pub baseline_runs: usize,
    pub measured_ise_mean: Option<f64>,
    pub measured_ise_sd: Option<f64>,
    pub measured_reduction_pct_mean: Option<f64>,
    pub measured_reduction_pct_sd: Option<f64>,
    pub welch_p_value: Option<f64>,
    pub reference_ise: Option<f64>,
    pub reference_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub table: Table,
    pub seeds: usize,
    pub rows: Vec<SummaryRow>,
    /// `(d, C_T)` grid points with no integer per-axis count.
    pub skipped: Vec<(usize, usize)>,
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

pub fn summarize_cell(table: Table, cell: &Cell, report: &ExperimentReport) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for run in &report.runs {
        for r in &run.rows {
            if !names.contains(&r.estimator.as_str()) {
                names.push(&r.estimator);
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<_> = report.runs.iter().filter_map(|r| r.row(name)).collect();
            let ise: Vec<f64> = rows.iter().filter_map(|r| r.ise.map(|i| i.value)).collect();
            let red: Vec<f64> = rows.iter().filter_map(|r| r.reduction_pct).collect();
            let (ise_m, ise_sd) = mean_sd(&ise);
            let (red_m, red_sd) = mean_sd(&red);
            let (ref_ise, ref_red) = match table {
                Table::One => (reference_ise(cell.components, name), None),
                Table::Two if name == TABLE2_DNMM => (None, reference_reduction(cell.d, cell.components)),
                Table::Two => (None, None),
            };
            SummaryRow {
                cell: cell.label.clone(),
                d: cell.d,
                components: cell.components,
                estimator: name.to_string(),
                runs: rows.len(),
                failed: rows.iter().filter(|r| r.status == Status::Failed).count(),
                baseline_runs: report
                    .runs
                    .iter()
                    .filter(|r| r.baseline.as_deref() == Some(name))
                    .count(),
                measured_ise_mean: ise_m,
                measured_ise_sd: ise_sd,
                measured_reduction_pct_mean: red_m,
                measured_reduction_pct_sd: red_sd,
                welch_p_value: report
                    .welch
                    .iter()
                    .find(|w| w.estimator == name)
                    .and_then(|w| w.p_value),
                reference_ise: ref_ise,
                reference_reduction_pct: ref_red,
            }
        })
        .collect()
}

pub fn summary_csv(summary: &Summary) -> String {
    let o = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(
        "cell,d,components,estimator,runs,failed,baseline_runs,measured_ise_mean,measured_ise_sd,measured_reduction_pct_mean,measured_reduction_pct_sd,welch_p_value,reference_ise,reference_reduction_pct\n",
    );
    for r in &summary.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            r.d,
            r.components,
            r.estimator,
            r.runs,
            r.failed,
            r.baseline_runs,
            o(r.measured_ise_mean),
            o(r.measured_ise_sd),
            o(r.measured_reduction_pct_mean),
            o(r.measured_reduction_pct_sd),
            o(r.welch_p_value),
            o(r.reference_ise),
            o(r.reference_reduction_pct),
        );
    }
    out
}

/// Generates, trains and scores every cell and seed under `opts.out`.
pub fn replicate(opts: &ReplicateOptions, mut progress: impl FnMut(&str)) -> Result<Summary> {
    opts.validate()?;
    let (cells, skipped) = cells(opts);
    let mut rows = Vec::new();
    for cell in &cells {
        let cell_dir = opts.out.join(&cell.label);
        let mut runs = Vec::with_capacity(opts.seeds);
        for seed in 0..opts.seeds {
            let mut config = cell.config.clone();
            config.seed = seed as u64;
            let run_dir = cell_dir.join(format!("seed{seed}"));
            progress(&format!("{} seed {seed}", cell.label));
            gen_data(&config, &run_dir)?;
            train(&config, &run_dir)?;
            runs.push(evaluate_run(&run_dir, &config)?);
        }
        let report = build_report(runs);
        write_cell(&cell_dir, &report)?;
        rows.extend(summarize_cell(opts.table, cell, &report));
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        table: opts.table,
        seeds: opts.seeds,
        rows,
        skipped,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::format(&opts.out, e))?;
    write_file(&opts.out.join("summary.json"), json.as_bytes())?;
    write_file(&opts.out.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    Ok(summary)
}

fn write_cell(dir: &Path, report: &ExperimentReport) -> Result<()> {
    write_file(&dir.join("report.csv"), report_csv(report).as_bytes())?;
    write_file(&dir.join("welch.csv"), welch_csv(&report.welch).as_bytes())
}
