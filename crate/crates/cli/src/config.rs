use std::path::Path;

use dnmm::select::{ParamRange, SearchConfig};
use dnmm::synth::{FtMixture, MGev, TargetDensity, DEFAULT_GRID_CAP};
use dnmm::{Architecture, DomainBox, TrainConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Version of every JSON and CSV artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Proposal scale used on the univariate domain, which is 11 units wide.
const UNIVARIATE_SIGMA: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Univariate Fisher-Tippett mixture with `c` components.
    FisherTippett { c: usize },
    /// `d`-dimensional m-GEV mixture with `c` modes per dimension.
    MGev { d: usize, c: usize },
}

impl TaskSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::FisherTippett { .. } => 1,
            Self::MGev { d, .. } => *d,
        }
    }

    /// `[-0.5, 10.5]` for univariate tasks, `[0, 1.1]^d` otherwise.
    pub fn default_domain(&self) -> DomainBox {
        match self {
            Self::FisherTippett { .. } => DomainBox::cube(1, -0.5, 10.5).expect("valid box"),
            Self::MGev { d, .. } => DomainBox::cube(*d, 0.0, 1.1).expect("valid box"),
        }
    }

    /// The univariate proposal scale, shrunk in proportion to the domain width.
    pub fn default_sigma(&self) -> f64 {
        let domain = self.default_domain();
        UNIVARIATE_SIGMA * (domain.upper()[0] - domain.lower()[0]) / 11.0
    }

    pub fn draw_target<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TargetDensity> {
        Ok(match self {
            Self::FisherTippett { c } => TargetDensity::FisherTippett(FtMixture::random_task(*c, rng)?),
            Self::MGev { d, c } => TargetDensity::MGev(MGev::random_task(*d, *c, DEFAULT_GRID_CAP, rng)?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Self::FisherTippett { c } => format!("ft-c{c}"),
            Self::MGev { d, c } => format!("mgev-d{d}-c{c}"),
        }
    }
}

/// How raw data coordinates map into the model domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Normalization {
    /// Data are used as they are; points outside the domain are dropped.
    #[default]
    Identity,
    /// The training bounding box, widened by `padding` of its extent per side, is stretched onto the domain.
    Fit { padding: f64 },
}

/// A baseline hyperparameter that is either given or picked by validation likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Tuned {
    Fixed {
        value: f64,
    },
    /// Log-uniform random search over `[low, high]`.
    Search {
        low: f64,
        high: f64,
        trials: usize,
    },
}

impl Tuned {
    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Self::Fixed { value } => value > 0.0 && value.is_finite(),
            Self::Search { low, high, trials } => low > 0.0 && high >= low && high.is_finite() && trials >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Config(format!("invalid {what} setting {self:?}")))
        }
    }
}

/// Random search over DNMM hyperparameters on validation likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnmmSearch {
    pub budget: usize,
    pub space: Vec<ParamRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnmmSpec {
    /// Defaults to `<k>-dnmm`.
    pub name: Option<String>,
    pub k: usize,
    pub hidden: Vec<usize>,
    /// Initial weights and biases are uniform on `±half_width`.
    pub half_width: f64,
    /// Uniform points used for the initial normalizers.
    pub init_points: usize,
    pub train: TrainConfig,
    pub search: Option<DnmmSearch>,
}

impl Default for DnmmSpec {
    fn default() -> Self {
        Self {
            name: None,
            k: 8,
            hidden: vec![9],
            half_width: 0.5,
            init_points: 10_000,
            train: TrainConfig::default(),
            search: None,
        }
    }
}

impl DnmmSpec {
    /// Defaults with the proposal scale matched to the task's domain.
    pub fn for_task(task: &TaskSpec) -> Self {
        let mut spec = Self::default();
        spec.train.proposal.sigma = task.default_sigma();
        spec
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}-dnmm", self.k))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.hidden.clone())
    }

    /// Applies named hyperparameters from a search draw.
    pub fn with_hyperparams(&self, hp: &dnmm::select::Hyperparams) -> Result<Self> {
        let mut spec = self.clone();
        for (name, &v) in hp {
            match name.as_str() {
                "eta" => spec.train.eta = v,
                "rho" => spec.train.rho = v,
                "epochs" => spec.train.epochs = v.round() as usize,
                "m" => spec.train.m = v.round() as usize,
                "theta" => spec.train.theta = v,
                "sigma" => spec.train.proposal.sigma = v,
                "half_width" => spec.half_width = v,
                "k" => spec.k = v.round() as usize,
                other => return Err(CliError::Config(format!("unknown DNMM hyperparameter {other:?}"))),
            }
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(CliError::Config(format!(
                "{}: k and every hidden width must be positive",
                self.label()
            )));
        }
        if !(self.half_width > 0.0) || self.init_points == 0 {
            return Err(CliError::Config(format!(
                "{}: half_width and init_points must be positive",
                self.label()
            )));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", self.label())))?;
        if let Some(s) = &self.search {
            if s.budget == 0 || s.space.is_empty() {
                return Err(CliError::Config(format!(
                    "{}: search needs a budget and a space",
                    self.label()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roster {
    pub dnmm: Vec<DnmmSpec>,
    /// Component counts of the Gaussian mixtures.
    pub gmm: Vec<usize>,
    /// Parzen base width `h1`.
    pub parzen: Option<Tuned>,
    /// k_n-NN base multiplier `k1`.
    pub knn: Option<Tuned>,
}

impl Default for Roster {
    fn default() -> Self {
        Self {
            dnmm: [4, 8, 12]
                .into_iter()
                .map(|k| DnmmSpec {
                    k,
                    ..DnmmSpec::default()
                })
                .collect(),
            gmm: vec![8, 16, 32],
            parzen: Some(Tuned::Fixed { value: 1.0 }),
            knn: Some(Tuned::Fixed { value: 1.0 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Simpson nodes for univariate ISE (odd).
    pub simpson_nodes: usize,
    /// Uniform points for multivariate ISE.
    pub mc_samples: usize,
    /// Per-side widening of the domain for univariate ISE, as a fraction of its width.
    pub padding: f64,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            simpson_nodes: 20_001,
            mc_samples: 100_000,
            padding: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Width,
    Depth,
    Random,
}

/// Settings for the `select` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSpec {
    pub strategy: Strategy,
    /// Starting point; its architecture is the base of width/depth growth.
    pub dnmm: DnmmSpec,
    pub search: SearchConfig,
    /// Sampled ranges for the random strategy.
    pub space: Vec<ParamRange>,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Width,
            dnmm: DnmmSpec {
                hidden: vec![3],
                ..DnmmSpec::default()
            },
            search: SearchConfig::default(),
            space: vec![ParamRange::log("eta", 1e-3, 3e-2), ParamRange::log("rho", 0.1, 10.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Seed of the task draw and the sample.
    pub seed: u64,
    pub train_size: usize,
    pub validation_size: usize,
    /// Model domain; defaults by task.
    pub domain: Option<DomainBox>,
    pub normalization: Normalization,
    pub roster: Roster,
    pub evaluation: EvaluationSpec,
    pub selection: SelectionSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(TaskSpec::FisherTippett { c: 5 })
    }
}

impl ExperimentConfig {
    /// Defaults for `task`, with the proposal scale matched to its domain.
    pub fn for_task(task: TaskSpec) -> Self {
        let template = DnmmSpec::for_task(&task);
        let mut roster = Roster {
            dnmm: [4, 8, 12]
                .into_iter()
                .map(|k| DnmmSpec { k, ..template.clone() })
                .collect(),
            ..Roster::default()
        };
        if let TaskSpec::MGev { .. } = task {
            roster.gmm = vec![4, 8, 16, 32];
        }
        let selection = SelectionSpec {
            dnmm: DnmmSpec {
                hidden: vec![3],
                ..template
            },
            ..SelectionSpec::default()
        };
        Self {
            task,
            seed: 0,
            train_size: 800,
            validation_size: 400,
            domain: None,
            normalization: Normalization::Identity,
            roster,
            evaluation: EvaluationSpec::default(),
            selection,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses a possibly partial config. Missing fields take the defaults of
    /// the named task, and every DNMM entry is completed from the task's
    /// DNMM template.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| CliError::Config(e.to_string());
        let mut user: Value = serde_json::from_str(text).map_err(bad)?;
        let task = match user.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(bad)?,
            None => TaskSpec::FisherTippett { c: 5 },
        };
        let base = Self::for_task(task);
        let template = serde_json::to_value(DnmmSpec::for_task(&base.task)).map_err(bad)?;
        if let Some(entries) = user.pointer_mut("/roster/dnmm").and_then(Value::as_array_mut) {
            for entry in entries.iter_mut() {
                let mut full = template.clone();
                merge(&mut full, entry.take());
                *entry = full;
            }
        }
        let mut merged = serde_json::to_value(&base).map_err(bad)?;
        merge(&mut merged, user);
        let config: Self = serde_json::from_value(merged).map_err(bad)?;
        config.validate()?;
        Ok(config)
    }

    pub fn domain(&self) -> DomainBox {
        self.domain.clone().unwrap_or_else(|| self.task.default_domain())
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = match self.task {
            TaskSpec::FisherTippett { c } => (c, 1),
            TaskSpec::MGev { d, c } => (c, d),
        };
        if c == 0 || d == 0 {
            return Err(CliError::Config("task needs c >= 1 and d >= 1".into()));
        }
        if self.train_size == 0 || self.validation_size == 0 {
            return Err(CliError::Config("train and validation sizes must be positive".into()));
        }
        if self.domain().dim() != self.task.dim() {
            return Err(CliError::Config("domain dimension does not match the task".into()));
        }
        if let Normalization::Fit { padding } = self.normalization {
            if !(padding >= 0.0) {
                return Err(CliError::Config("normalization padding must be nonnegative".into()));
            }
        }
        let r = &self.roster;
        if r.dnmm.is_empty() && r.gmm.is_empty() && r.parzen.is_none() && r.knn.is_none() {
            return Err(CliError::Config("the estimator roster is empty".into()));
        }
        for spec in &r.dnmm {
            spec.validate()?;
        }
        if r.gmm.contains(&0) || r.gmm.iter().any(|&k| k > self.train_size) {
            return Err(CliError::Config("GMM orders must lie in 1..=train_size".into()));
        }
        if let Some(t) = &r.parzen {
            t.validate("parzen")?;
        }
        if let Some(t) = &r.knn {
            t.validate("knn")?;
        }
        let ev = &self.evaluation;
        if ev.simpson_nodes < 3 || ev.simpson_nodes.is_multiple_of(2) || ev.mc_samples < 2 || !(ev.padding >= 0.0) {
            return Err(CliError::Config(
                "evaluation needs odd simpson_nodes >= 3, mc_samples >= 2, padding >= 0".into(),
            ));
        }
        self.selection.dnmm.validate()?;
        self.selection
            .search
            .validate()
            .map_err(|e| CliError::Config(format!("selection: {e}")))?;
        Ok(())
    }
}

/// Overlays `patch` on `base`, recursing into objects; anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
