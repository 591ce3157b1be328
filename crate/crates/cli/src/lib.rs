//! Command-line driver: data generation, training, evaluation, model selection
//! and the replication experiments.

mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod normalize;
pub mod replicate;
pub mod report;

pub use cli::{run, Cli, Command};
pub use error::{CliError, Result};
