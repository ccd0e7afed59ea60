//! End-to-end experiment execution: identical data, graph and seeds for every
//! listed strategy, CSV/JSON reports on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use mira_core::client::ClientState;
use mira_core::graph::TaskGraph;
use mira_core::metrics::{self, CostModel, RoundReport};
use mira_core::model::{self, AdaptedModel, ModelSpec};
use mira_core::seed;
use mira_core::server::{RoundHook, ServerState};
use mira_core::tasks::{self, ClientDataset, TaskUniverse};

use crate::config::{ExperimentConfig, GraphMode, Seeds, Strategy};
use crate::CliError;

/// Everything shared across strategies of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seeds: Seeds,
    pub spec: ModelSpec,
    pub universe: TaskUniverse,
    pub datasets: Vec<ClientDataset>,
    pub graph: TaskGraph,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let seeds = cfg.seeds.resolve();
    let spec = cfg.model_spec();
    let (universe, datasets) = tasks::generate_universe(&cfg.universe_config())?;
    let graph = match cfg.graph.mode {
        GraphMode::Truth => tasks::similarity_from_truth(&universe, cfg.graph.scale)?,
        GraphMode::Random => {
            TaskGraph::random(cfg.federation.clients, cfg.graph.density, seeds.graph)?
        }
        GraphMode::File => {
            let path = cfg.graph.path.as_deref().expect("validated");
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("graph.path {}: {e}", path.display())))?;
            let g = TaskGraph::from_text(&text)
                .map_err(|e| CliError::Config(format!("graph.path: {e}")))?;
            if g.num_clients() != cfg.federation.clients {
                return Err(CliError::Config(format!(
                    "graph.path has {} clients, federation.clients is {}",
                    g.num_clients(),
                    cfg.federation.clients
                )));
            }
            g
        }
    };
    Ok(Prepared {
        seeds,
        spec,
        universe,
        datasets,
        graph,
    })
}

/// Fresh clients sharing one base and one adapter initialization.
pub fn build_clients(
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Result<Vec<ClientState>, CliError> {
    let template = AdaptedModel::build(prep.spec.clone(), prep.seeds.base, prep.seeds.adapter)?;
    Ok(prep
        .datasets
        .iter()
        .enumerate()
        .map(|(k, data)| {
            ClientState::new(
                k,
                template.clone(),
                data.clone(),
                cfg.federation.local_lr,
                cfg.federation.batch_size,
                seed::derive(prep.seeds.minibatch, k as u64),
            )
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub reports: Vec<RoundReport>,
    pub final_deltas: Vec<Vec<f64>>,
    /// Every client's frozen bases still equal the drawn ones bitwise.
    pub bases_frozen: bool,
    pub warnings: Vec<String>,
}

impl StrategyRun {
    pub fn last(&self) -> &RoundReport {
        self.reports.last().expect("at least one round")
    }
}

pub fn run_strategy(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    which: Strategy,
    hook: &mut dyn RoundHook,
) -> Result<StrategyRun, CliError> {
    let mut clients = build_clients(cfg, prep)?;
    let f = &cfg.federation;
    let mut server = ServerState::new(
        prep.graph.clone(),
        cfg.strategy(which),
        f.sample_fraction,
        prep.seeds.sampling,
        &clients,
    )?;
    server.parallel_clients = f.parallel_clients;
    let warnings = server.warnings();
    for w in &warnings {
        log::warn!("{}: {w}", which.name());
    }
    let reports = server.run(f.rounds, f.local_steps, &mut clients, hook)?;
    let drawn = model::draw_bases(&prep.spec, prep.seeds.base);
    let bases_frozen = clients.iter().all(|c| c.model().bases() == drawn);
    Ok(StrategyRun {
        strategy: which,
        reports,
        final_deltas: server.deltas().to_vec(),
        bases_frozen,
        warnings,
    })
}

/// Run every configured strategy without touching the file system.
pub fn run_all(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<StrategyRun>, CliError> {
    cfg.federation
        .strategies
        .iter()
        .map(|&s| {
            log::info!("running {}", s.name());
            run_strategy(cfg, prep, s, &mut ())
        })
        .collect()
}

impl Strategy {
    pub fn name(self) -> &'static str {
        mira_core::server::StrategyKind::from(self).as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub strategies: Vec<StrategySummary>,
    pub clients: Vec<ClientRow>,
    pub costs: Vec<CostRow>,
    pub graph: GraphSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub name: String,
    pub rounds: usize,
    pub final_mean_test_loss: f64,
    pub final_mean_train_loss: f64,
    #[serde(rename = "final_J")]
    pub final_j: f64,
    #[serde(rename = "final_F")]
    pub final_f: f64,
    #[serde(rename = "final_R")]
    pub final_r: f64,
    pub bases_frozen: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRow {
    pub client: usize,
    pub cluster: usize,
    pub n_train: usize,
    /// Final test loss keyed by strategy.
    pub test_loss: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub strategy: String,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub cum_up_bytes: u64,
    pub cum_down_bytes: u64,
    pub total_comm_bytes: u64,
    pub memory_base_bytes: u64,
    pub memory_trainable_bytes: u64,
    pub memory_optimizer_bytes: u64,
    pub memory_total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSummary {
    pub clients: usize,
    pub components: usize,
    pub max_degree: f64,
    pub safe_step_bound: Option<f64>,
}

pub fn summarize(prep: &Prepared, runs: &[StrategyRun]) -> Summary {
    let cost = CostModel::default();
    let mem = metrics::memory_cost(&prep.spec, &cost);
    let strategies = runs
        .iter()
        .map(|r| {
            let last = r.last();
            StrategySummary {
                name: r.strategy.name().to_string(),
                rounds: last.round,
                final_mean_test_loss: last.mean_test(),
                final_mean_train_loss: last.mean_train(),
                final_j: last.objective.total,
                final_f: last.objective.loss,
                final_r: last.objective.regularizer,
                bases_frozen: r.bases_frozen,
                warnings: r.warnings.clone(),
            }
        })
        .collect();
    let clients = (0..prep.datasets.len())
        .map(|k| ClientRow {
            client: k,
            cluster: prep.universe.assignment[k],
            n_train: prep.datasets[k].n_train(),
            test_loss: runs
                .iter()
                .map(|r| {
                    (
                        r.strategy.name().to_string(),
                        r.last().per_client[k].test_loss,
                    )
                })
                .collect(),
        })
        .collect();
    let costs = runs
        .iter()
        .map(|r| {
            let last = r.last();
            CostRow {
                strategy: r.strategy.name().to_string(),
                trainable_params: prep.spec.trainable_count(),
                frozen_params: prep.spec.frozen_count(),
                cum_up_bytes: last.cum_up_bytes,
                cum_down_bytes: last.cum_down_bytes,
                total_comm_bytes: last.cum_up_bytes + last.cum_down_bytes,
                memory_base_bytes: mem.base,
                memory_trainable_bytes: mem.trainable,
                memory_optimizer_bytes: mem.optimizer,
                memory_total_bytes: mem.total(),
            }
        })
        .collect();
    Summary {
        strategies,
        clients,
        costs,
        graph: GraphSummary {
            clients: prep.graph.num_clients(),
            components: prep.graph.connected_components(),
            max_degree: prep.graph.max_degree(),
            safe_step_bound: prep.graph.safe_step_bound().ok(),
        },
    }
}

pub const ROUNDS_HEADER: [&str; 10] = [
    "t",
    "J",
    "F",
    "R_value",
    "mean_train",
    "mean_test",
    "up_bytes",
    "down_bytes",
    "cum_up_bytes",
    "cum_down_bytes",
];

pub const CLIENTS_HEADER: [&str; 5] = ["t", "client", "train_loss", "test_loss", "sampled_flag"];

pub fn write_rounds_csv(path: &Path, reports: &[RoundReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROUNDS_HEADER)?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            r.objective.total.to_string(),
            r.objective.loss.to_string(),
            r.objective.regularizer.to_string(),
            r.mean_train().to_string(),
            r.mean_test().to_string(),
            r.up_bytes.to_string(),
            r.down_bytes.to_string(),
            r.cum_up_bytes.to_string(),
            r.cum_down_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_clients_csv(path: &Path, reports: &[RoundReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLIENTS_HEADER)?;
    for r in reports {
        for c in &r.per_client {
            w.write_record([
                r.round.to_string(),
                c.id.to_string(),
                c.train_loss.to_string(),
                c.test_loss.to_string(),
                u8::from(c.sampled).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run the experiment and write everything under `cfg.output.dir`:
///
/// ```text
/// effective_config.toml
/// summary.json
/// <strategy>/rounds.csv
/// <strategy>/clients.csv
/// data/client_<k>_{train,test}.csv   (when output.export_data)
/// ```
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let prep = prepare(cfg)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("effective_config.toml"),
        cfg.resolved().to_toml_string(),
    )?;
    if cfg.output.export_data {
        for (k, data) in prep.datasets.iter().enumerate() {
            tasks::export_client_csv(&dir.join("data"), k, data)?;
        }
    }
    let runs = run_all(cfg, &prep)?;
    for run in &runs {
        let sub = dir.join(run.strategy.name());
        fs::create_dir_all(&sub)?;
        write_rounds_csv(&sub.join("rounds.csv"), &run.reports)?;
        write_clients_csv(&sub.join("clients.csv"), &run.reports)?;
    }
    let summary = summarize(&prep, &runs);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}
