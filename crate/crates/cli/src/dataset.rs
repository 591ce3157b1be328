use std::fs;
use std::io::Write;
use std::path::Path;

use dnmm::synth::{split_sample, TargetDensity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TaskSpec, SCHEMA_VERSION};
use crate::error::{CliError, Result};

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub seed: u64,
    pub train_size: usize,
    pub validation_size: usize,
    /// `train` or `validation`.
    pub split: String,
    pub target: TargetDensity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub generator: Option<GeneratorRecord>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// The exact target density, if the file came from the generator.
    pub fn target(&self) -> Option<&TargetDensity> {
        self.generator.as_ref().map(|g| &g.target)
    }
}

pub fn column_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

/// Draws the task and the sample, then splits it into `(train, validation)`.
pub fn generate(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = config.task.draw_target(&mut rng)?;
    let sample = target.sample(config.train_size + config.validation_size, &mut rng);
    let (train, validation) = split_sample(sample, config.train_size, &mut rng)?;
    let columns = column_names(config.task.dim());
    let record = |split: &str| GeneratorRecord {
        schema_version: SCHEMA_VERSION,
        task: config.task.clone(),
        seed: config.seed,
        train_size: config.train_size,
        validation_size: config.validation_size,
        split: split.to_string(),
        target: target.clone(),
    };
    Ok((
        Dataset {
            generator: Some(record("train")),
            columns: columns.clone(),
            rows: train,
        },
        Dataset {
            generator: Some(record("validation")),
            columns,
            rows: validation,
        },
    ))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    if let Some(g) = &data.generator {
        let json = serde_json::to_string(g).map_err(|e| CliError::format(path, e))?;
        writeln!(out, "# {json}").expect("write to memory");
    }
    let mut w = csv::Writer::from_writer(&mut out);
    let io = |e: csv::Error| CliError::format(path, e);
    w.write_record(&data.columns).map_err(io)?;
    for row in &data.rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    drop(w);
    write_file(path, &out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let generator = match text.lines().next().and_then(|l| l.strip_prefix('#')) {
        Some(json) => {
            let mut g: GeneratorRecord = serde_json::from_str(json.trim()).map_err(|e| CliError::format(path, e))?;
            g.target = g.target.rebuild()?;
            Some(g)
        }
        None => None,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::format(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.is_empty() {
        return Err(CliError::format(path, "missing header row"));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::format(path, e))?;
        let row = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::format(path, format!("row {}: {e}", i + 1)))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CliError::format(path, format!("row {}: non-finite value", i + 1)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::format(path, "no data rows"));
    }
    if let Some(g) = &generator {
        if g.target.dim() != columns.len() {
            return Err(CliError::format(path, "generator dimension does not match the columns"));
        }
    }
    Ok(Dataset {
        generator,
        columns,
        rows,
    })
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
