use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{self, resolve_config};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::replicate::{replicate, ReplicateOptions, Table};

#[derive(Debug, Parser)]
#[command(name = "dnmm", version, about = "Deep neural mixture density estimation")]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "DNMM_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic task and write its train and validation files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the configured estimators on a run directory's data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Score trained runs against validation data and the true density.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<run>/report` for a single run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search DNMM architectures or hyperparameters on validation likelihood.
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/selection`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun the benchmark tables and compare with the reference values.
    Replicate {
        #[arg(long, value_enum)]
        table: Table,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Override the DNMM epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the trial count of every searched estimator.
        #[arg(long)]
        search_budget: Option<usize>,
        /// Every dimension and component count of the multivariate table.
        #[arg(long)]
        full_grid: bool,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Config("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let (train, validation) = commands::gen_data(&config, &out)?;
            eprintln!(
                "wrote {} train and {} validation rows to {}",
                train.rows.len(),
                validation.rows.len(),
                out.display()
            );
        }
        Command::Train { config, run } => {
            let config = resolve_config(config.as_deref(), &run)?;
            let manifest = commands::train(&config, &run)?;
            for e in &manifest.estimators {
                match &e.error {
                    None => eprintln!("{}: ok", e.name),
                    Some(err) => eprintln!("{}: failed: {err}", e.name),
                }
            }
            if manifest.dropped_train > 0 {
                eprintln!(
                    "{} training points fell outside the domain and were dropped",
                    manifest.dropped_train
                );
            }
        }
        Command::Evaluate { run, config, out } => {
            let out = match (out, run.as_slice()) {
                (Some(o), _) => o,
                (None, [single]) => single.join("report"),
                (None, _) => return Err(CliError::Config("--out is required with several runs".into())),
            };
            let report = commands::evaluate(&run, config.as_deref(), &out)?;
            for r in &report.runs {
                eprintln!("{}: baseline {}", r.run, r.baseline.as_deref().unwrap_or("none"));
            }
            eprintln!("report written to {}", out.display());
        }
        Command::Select { config, run, out } => {
            let config = resolve_config(config.as_deref(), &run)?;
            let out = out.unwrap_or_else(|| run.join("selection"));
            let report = commands::select(&config, &run, &out)?;
            eprintln!(
                "winner: {} (validation log-likelihood {})",
                report.winner.architecture.describe(),
                report.winner.validation_ll
            );
        }
        Command::Replicate {
            table,
            seeds,
            out,
            epochs,
            search_budget,
            full_grid,
        } => {
            let opts = ReplicateOptions {
                table,
                seeds,
                out,
                epochs,
                search_budget,
                full_grid,
            };
            let summary = replicate(&opts, |m| eprintln!("{m}"))?;
            for (d, ct) in &summary.skipped {
                eprintln!("skipped d = {d}, C_T = {ct}: no integer per-axis count");
            }
            eprintln!("summary written to {}", opts.out.join("summary.csv").display());
        }
    }
    Ok(())
}
