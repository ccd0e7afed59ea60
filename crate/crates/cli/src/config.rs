//! Experiment configuration: a sectioned `key = value` file (TOML syntax),
//! optionally overridden by `MIRA_<SECTION>_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mira_core::model::{Activation, Head, ModelSpec};
use mira_core::seed;
use mira_core::server::{AggregationStrategy, NeighborMode, StrategyKind};
use mira_core::tasks::{TaskFamily, UniverseConfig};

use crate::CliError;

pub const ENV_PREFIX: &str = "MIRA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub model: ModelSection,
    pub tasks: TasksSection,
    pub graph: GraphSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mira,
    Fedavg,
    LocalOnly,
}

impl From<Strategy> for StrategyKind {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Mira => StrategyKind::Mira,
            Strategy::Fedavg => StrategyKind::FedAvg,
            Strategy::LocalOnly => StrategyKind::LocalOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Neighbors {
    #[default]
    AllStale,
    SampledOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadName {
    #[default]
    Mse,
    SoftmaxXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    #[default]
    Truth,
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub sample_fraction: f64,
    pub lambda: f64,
    pub eta: f64,
    pub local_lr: f64,
    pub batch_size: usize,
    pub neighbor_mode: Neighbors,
    pub strategies: Vec<Strategy>,
    pub parallel_clients: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 20,
            rounds: 60,
            local_steps: 5,
            sample_fraction: 0.1,
            lambda: 0.1,
            eta: 1.0,
            local_lr: 0.05,
            batch_size: 8,
            neighbor_mode: Neighbors::AllStale,
            strategies: vec![Strategy::Mira, Strategy::Fedavg, Strategy::LocalOnly],
            parallel_clients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden widths between the task input and output dimensions.
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub init_scale: f64,
    pub activation: ActivationName,
    pub head: HeadName,
    pub lora_scale: f64,
    pub base_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            rank: 16,
            init_scale: 0.02,
            activation: ActivationName::Tanh,
            head: HeadName::Mse,
            lora_scale: 1.0,
            base_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksSection {
    pub family: Family,
    pub clusters: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub size_skew: f64,
}

impl Default for TasksSection {
    fn default() -> Self {
        Self {
            family: Family::Regression,
            clusters: 4,
            dim: 16,
            out_dim: 16,
            intra_spread: 0.05,
            inter_spread: 0.5,
            noise_std: 0.5,
            n_train: 20,
            n_test: 200,
            size_skew: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub mode: GraphMode,
    /// Edge keep probability for `random`.
    pub density: f64,
    /// Kernel width for `truth`.
    pub scale: f64,
    /// Matrix file for `file`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            mode: GraphMode::Truth,
            density: 0.3,
            scale: 4.0,
            path: None,
        }
    }
}

/// Named seeds. Anything left unset is derived from `master`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub export_data: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            export_data: false,
        }
    }
}

/// Fully resolved seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub base: u64,
    pub adapter: u64,
    pub data: u64,
    pub sampling: u64,
    pub graph: u64,
    pub minibatch: u64,
}

impl SeedSection {
    pub fn resolve(&self) -> Seeds {
        // 63 bits so resolved seeds stay representable as TOML integers.
        let d = |tag: u64| seed::derive(self.master, tag) >> 1;
        Seeds {
            base: self.base.unwrap_or_else(|| d(1)),
            adapter: self.adapter.unwrap_or_else(|| d(2)),
            data: self.data.unwrap_or_else(|| d(3)),
            sampling: self.sampling.unwrap_or_else(|| d(4)),
            graph: self.graph.unwrap_or_else(|| d(5)),
            minibatch: self.minibatch.unwrap_or_else(|| d(6)),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply environment overrides from `vars`.
    pub fn load(
        path: &Path,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        apply_env_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Copy with every derived seed written out.
    pub fn resolved(&self) -> Self {
        let s = self.seeds.resolve();
        let mut out = self.clone();
        out.seeds = SeedSection {
            master: self.seeds.master,
            base: Some(s.base),
            adapter: Some(s.adapter),
            data: Some(s.data),
            sampling: Some(s.sampling),
            graph: Some(s.graph),
            minibatch: Some(s.minibatch),
        };
        out
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut dims = vec![self.tasks.dim];
        dims.extend(&self.model.hidden);
        dims.push(self.tasks.out_dim);
        ModelSpec {
            layer_dims: dims,
            rank: self.model.rank,
            activation: match self.model.activation {
                ActivationName::Tanh => Activation::Tanh,
                ActivationName::Relu => Activation::Relu,
            },
            head: match self.model.head {
                HeadName::Mse => Head::Mse,
                HeadName::SoftmaxXent => Head::SoftmaxXent,
            },
            init_scale: self.model.init_scale,
            lora_scale: self.model.lora_scale,
            base_scale: self.model.base_scale,
        }
    }

    pub fn universe_config(&self) -> UniverseConfig {
        let t = &self.tasks;
        UniverseConfig {
            clients: self.federation.clients,
            clusters: t.clusters,
            dim: t.dim,
            out_dim: t.out_dim,
            intra_spread: t.intra_spread,
            inter_spread: t.inter_spread,
            noise_std: t.noise_std,
            n_train: t.n_train,
            n_test: t.n_test,
            size_skew: t.size_skew,
            family: match t.family {
                Family::Regression => TaskFamily::Regression,
                Family::Classification => TaskFamily::Classification,
            },
            seed: self.seeds.resolve().data,
        }
    }

    pub fn strategy(&self, which: Strategy) -> AggregationStrategy {
        let f = &self.federation;
        AggregationStrategy {
            kind: which.into(),
            eta: f.eta,
            lambda: f.lambda,
            neighbor_mode: match f.neighbor_mode {
                Neighbors::AllStale => NeighborMode::AllStale,
                Neighbors::SampledOnly => NeighborMode::SampledOnly,
            },
        }
    }

    /// Check every field against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        let f = &self.federation;
        if f.clients < 2 {
            return Err(config_err(format!(
                "federation.clients must be >= 2, got {}",
                f.clients
            )));
        }
        if f.rounds == 0 {
            return Err(config_err("federation.rounds must be >= 1"));
        }
        if f.local_steps == 0 {
            return Err(config_err("federation.local_steps must be >= 1"));
        }
        if !(f.sample_fraction > 0.0 && f.sample_fraction <= 1.0) {
            return Err(config_err(format!(
                "federation.sample_fraction must be in (0, 1], got {}",
                f.sample_fraction
            )));
        }
        if !(f.lambda >= 0.0) || !f.lambda.is_finite() {
            return Err(config_err(format!(
                "federation.lambda must be >= 0, got {}",
                f.lambda
            )));
        }
        if f.strategies.contains(&Strategy::Mira) && (!(f.eta > 0.0) || !f.eta.is_finite()) {
            return Err(config_err(format!(
                "federation.eta must be > 0 for mira, got {}",
                f.eta
            )));
        }
        if !(f.local_lr >= 0.0) || !f.local_lr.is_finite() {
            return Err(config_err(format!(
                "federation.local_lr must be >= 0, got {}",
                f.local_lr
            )));
        }
        if f.batch_size == 0 {
            return Err(config_err("federation.batch_size must be >= 1"));
        }
        if f.strategies.is_empty() {
            return Err(config_err(
                "federation.strategies must list at least one strategy",
            ));
        }
        for (i, s) in f.strategies.iter().enumerate() {
            if f.strategies[..i].contains(s) {
                return Err(config_err(format!(
                    "federation.strategies lists {s:?} twice"
                )));
            }
        }
        self.model_spec()
            .validate()
            .map_err(|e| config_err(format!("model: {e}")))?;
        self.universe_config()
            .validate()
            .map_err(|e| config_err(format!("tasks: {e}")))?;
        let family_head = (self.tasks.family, self.model.head);
        if !matches!(
            family_head,
            (Family::Regression, HeadName::Mse) | (Family::Classification, HeadName::SoftmaxXent)
        ) {
            return Err(config_err(format!(
                "model.head {:?} does not fit tasks.family {:?}",
                self.model.head, self.tasks.family
            )));
        }
        let g = &self.graph;
        match g.mode {
            GraphMode::Random if !(g.density > 0.0 && g.density <= 1.0) => {
                return Err(config_err(format!(
                    "graph.density must be in (0, 1], got {}",
                    g.density
                )));
            }
            GraphMode::Truth if !(g.scale > 0.0) => {
                return Err(config_err(format!(
                    "graph.scale must be > 0, got {}",
                    g.scale
                )));
            }
            GraphMode::File if g.path.is_none() => {
                return Err(config_err(
                    "graph.path is required when graph.mode = \"file\"",
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Apply `MIRA_<SECTION>_<KEY>=value` overrides. Values are parsed as TOML
/// values, falling back to a plain string.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "MIRA_LOG")
        .collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let (section, key) = rest
            .split_once('_')
            .ok_or_else(|| config_err(format!("{name}: expected {ENV_PREFIX}<SECTION>_<KEY>")))?;
        let value = parse_env_value(&raw);
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(sec) = entry else {
            return Err(config_err(format!("{name}: [{section}] is not a section")));
        };
        sec.insert(key.to_string(), value);
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
