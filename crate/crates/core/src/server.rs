//! Round orchestration: sample clients, train them locally, aggregate.
//!
//! The regularization update for a sampled client `k` is
//!
//! ```text
//! Δw_k ← fresh_k − ηλ Σ_{ℓ≠k} a_kℓ (fresh_k − latest_ℓ)
//! ```
//!
//! where `latest_ℓ` is the fresh delta when `ℓ` was sampled this round and
//! the stored server-side delta otherwise. Non-sampled clients keep their
//! stored delta. Every output is computed from pre-update values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::metrics::{self, ClientMetrics, CostModel, RoundReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Mira,
    FedAvg,
    LocalOnly,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Mira => "mira",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mira" => Ok(StrategyKind::Mira),
            "fedavg" => Ok(StrategyKind::FedAvg),
            "local_only" => Ok(StrategyKind::LocalOnly),
            other => Err(Error::Parse(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Which neighbours enter the regularization sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborMode {
    /// All `ℓ ≠ k`; non-sampled neighbours contribute their stored delta.
    #[default]
    AllStale,
    /// Only neighbours sampled in the same round.
    SampledOnly,
}

impl NeighborMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NeighborMode::AllStale => "all_stale",
            NeighborMode::SampledOnly => "sampled_only",
        }
    }
}

impl FromStr for NeighborMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_stale" => Ok(NeighborMode::AllStale),
            "sampled_only" => Ok(NeighborMode::SampledOnly),
            other => Err(Error::Parse(format!("unknown neighbor mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationStrategy {
    pub kind: StrategyKind,
    /// Server learning rate `η`.
    pub eta: f64,
    /// Regularization weight `λ`.
    pub lambda: f64,
    pub neighbor_mode: NeighborMode,
}

impl AggregationStrategy {
    pub fn mira(eta: f64, lambda: f64) -> Self {
        Self {
            kind: StrategyKind::Mira,
            eta,
            lambda,
            neighbor_mode: NeighborMode::AllStale,
        }
    }

    pub fn fedavg() -> Self {
        Self {
            kind: StrategyKind::FedAvg,
            eta: 0.0,
            lambda: 0.0,
            neighbor_mode: NeighborMode::AllStale,
        }
    }

    pub fn local_only() -> Self {
        Self {
            kind: StrategyKind::LocalOnly,
            eta: 0.0,
            lambda: 0.0,
            neighbor_mode: NeighborMode::AllStale,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.kind == StrategyKind::Mira && (!(self.eta > 0.0) || !self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be > 0 for mira, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Regularization update over all clients. `fresh` holds the deltas returned
/// by this round's sampled clients; `stored` is the server's current delta
/// for every client.
pub fn mira_update(
    graph: &TaskGraph,
    stored: &[Vec<f64>],
    fresh: &BTreeMap<usize, Vec<f64>>,
    eta_lambda: f64,
    mode: NeighborMode,
) -> Result<Vec<Vec<f64>>> {
    let k_total = graph.num_clients();
    check_inputs(k_total, stored, fresh)?;
    let latest = |l: usize| fresh.get(&l).unwrap_or(&stored[l]);
    let mut out = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let Some(own) = fresh.get(&k) else {
            out.push(stored[k].clone());
            continue;
        };
        let mut pull = vec![0.0; own.len()];
        for l in 0..k_total {
            let a = graph.weight(k, l);
            if l == k || a == 0.0 {
                continue;
            }
            if mode == NeighborMode::SampledOnly && !fresh.contains_key(&l) {
                continue;
            }
            for ((p, mine), theirs) in pull.iter_mut().zip(own).zip(latest(l)) {
                *p += a * (mine - theirs);
            }
        }
        out.push(
            own.iter()
                .zip(&pull)
                .map(|(w, p)| w - eta_lambda * p)
                .collect(),
        );
    }
    Ok(out)
}

/// Size-weighted mean of the fresh deltas, handed to every client.
pub fn fedavg_update(
    stored: &[Vec<f64>],
    fresh: &BTreeMap<usize, Vec<f64>>,
    train_sizes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(stored.len(), stored, fresh)?;
    if fresh.is_empty() {
        return Ok(stored.to_vec());
    }
    let total: usize = fresh.keys().map(|&k| train_sizes[k]).sum();
    let p = stored[0].len();
    let mut mean = vec![0.0; p];
    for (&k, delta) in fresh {
        let w = train_sizes[k] as f64 / total as f64;
        for (m, x) in mean.iter_mut().zip(delta) {
            *m += w * x;
        }
    }
    Ok(vec![mean; stored.len()])
}

fn check_inputs(
    k_total: usize,
    stored: &[Vec<f64>],
    fresh: &BTreeMap<usize, Vec<f64>>,
) -> Result<()> {
    if stored.len() != k_total {
        return Err(Error::DimensionMismatch {
            context: "stored deltas",
            expected: k_total,
            got: stored.len(),
        });
    }
    let p = stored.first().map_or(0, Vec::len);
    for s in stored {
        if s.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                got: s.len(),
            });
        }
    }
    for (&k, delta) in fresh {
        if k >= k_total {
            return Err(Error::MissingClient { client: k });
        }
        if delta.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                got: delta.len(),
            });
        }
    }
    Ok(())
}

/// Observer called once per round with the server deltas before and after.
pub trait RoundHook {
    fn on_round(&mut self, report: &RoundReport, before: &[Vec<f64>], after: &[Vec<f64>]) {
        let _ = (report, before, after);
    }
}

impl RoundHook for () {}

impl<F: FnMut(&RoundReport, &[Vec<f64>], &[Vec<f64>])> RoundHook for F {
    fn on_round(&mut self, report: &RoundReport, before: &[Vec<f64>], after: &[Vec<f64>]) {
        self(report, before, after)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    round: usize,
    deltas: Vec<Vec<f64>>,
    graph: TaskGraph,
    strategy: AggregationStrategy,
    sample_fraction: f64,
    sampling_seed: u64,
    train_sizes: Vec<usize>,
    cost: CostModel,
    cum_up: u64,
    cum_down: u64,
    pub parallel_clients: bool,
}

impl ServerState {
    pub fn new(
        graph: TaskGraph,
        strategy: AggregationStrategy,
        sample_fraction: f64,
        sampling_seed: u64,
        clients: &[ClientState],
    ) -> Result<Self> {
        strategy.validate()?;
        if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample_fraction must be in (0, 1], got {sample_fraction}"
            )));
        }
        if clients.len() != graph.num_clients() {
            return Err(Error::DimensionMismatch {
                context: "clients vs graph size",
                expected: graph.num_clients(),
                got: clients.len(),
            });
        }
        for (i, c) in clients.iter().enumerate() {
            if c.id() != i {
                return Err(Error::InvalidConfig(format!(
                    "client at position {i} has id {}",
                    c.id()
                )));
            }
        }
        Ok(Self {
            round: 0,
            deltas: clients.iter().map(ClientState::delta).collect(),
            graph,
            strategy,
            sample_fraction,
            sampling_seed,
            train_sizes: clients.iter().map(|c| c.data().n_train()).collect(),
            cost: CostModel::default(),
            cum_up: 0,
            cum_down: 0,
            parallel_clients: false,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    pub fn graph(&self) -> &TaskGraph {
        &self.graph
    }

    pub fn strategy(&self) -> &AggregationStrategy {
        &self.strategy
    }

    /// Configuration concerns that do not prevent a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let comps = self.graph.connected_components();
        if comps > 1 {
            out.push(format!(
                "similarity graph is disconnected ({comps} components)"
            ));
        }
        if self.strategy.kind == StrategyKind::Mira {
            let step = self.strategy.eta * self.strategy.lambda;
            match self.graph.safe_step_bound() {
                Ok(bound) if step > bound => out.push(format!(
                    "eta*lambda = {step} exceeds the safe step bound {bound}; the regularizer may grow"
                )),
                Err(_) if step > 0.0 => out.push("graph has no edges; regularization is inert".into()),
                _ => {}
            }
        }
        out
    }

    /// Sample for 1-based round `t`: `max(1, round(fraction·K))` distinct
    /// clients, sorted ascending.
    pub fn sample_for_round(&self, t: usize) -> Vec<usize> {
        let k = self.graph.num_clients();
        let m = ((self.sample_fraction * k as f64).round() as usize).clamp(1, k);
        let mut rng = crate::seed::rng_for(self.sampling_seed, t as u64);
        let mut picked = index::sample(&mut rng, k, m).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Sample for the upcoming round.
    pub fn sample_clients(&self) -> Vec<usize> {
        self.sample_for_round(self.round + 1)
    }

    pub fn mira_aggregate(&self, fresh: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let s = self.strategy.eta * self.strategy.lambda;
        mira_update(
            &self.graph,
            &self.deltas,
            fresh,
            s,
            self.strategy.neighbor_mode,
        )
    }

    pub fn fedavg_aggregate(&self, fresh: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        fedavg_update(&self.deltas, fresh, &self.train_sizes)
    }

    fn aggregate(&self, fresh: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        match self.strategy.kind {
            StrategyKind::Mira => self.mira_aggregate(fresh),
            StrategyKind::FedAvg => self.fedavg_aggregate(fresh),
            StrategyKind::LocalOnly => {
                check_inputs(self.deltas.len(), &self.deltas, fresh)?;
                let mut out = self.deltas.clone();
                for (&k, d) in fresh {
                    out[k] = d.clone();
                }
                Ok(out)
            }
        }
    }

    /// One full communication round.
    pub fn step(&mut self, clients: &mut [ClientState], local_steps: usize) -> Result<RoundReport> {
        let t = self.round + 1;
        let sampled = match self.strategy.kind {
            StrategyKind::LocalOnly => (0..clients.len()).collect(),
            _ => self.sample_for_round(t),
        };
        let mut selected = vec![false; clients.len()];
        for &k in &sampled {
            selected[k] = true;
        }

        let deltas = &self.deltas;
        let train = |(k, client): (usize, &mut ClientState)| -> (usize, Result<Vec<f64>>) {
            let res = client
                .sync(&deltas[k])
                .and_then(|()| client.instruction_tuning(local_steps));
            (k, res)
        };
        let results: Vec<(usize, Result<Vec<f64>>)> = if self.parallel_clients {
            clients
                .par_iter_mut()
                .enumerate()
                .filter(|(k, _)| selected[*k])
                .map(train)
                .collect()
        } else {
            clients
                .iter_mut()
                .enumerate()
                .filter(|(k, _)| selected[*k])
                .map(train)
                .collect()
        };
        let mut fresh = BTreeMap::new();
        for (k, res) in results {
            let delta = res.map_err(|e| Error::InRound {
                round: t,
                client: k,
                source: Box::new(e),
            })?;
            fresh.insert(k, delta);
        }

        let next = self.aggregate(&fresh)?;
        self.deltas = next;
        self.round = t;

        let spec = clients[0].model().spec();
        let (up, down) =
            metrics::round_comm_cost(spec, sampled.len(), self.strategy.kind, &self.cost);
        self.cum_up += up;
        self.cum_down += down;

        let deltas = &self.deltas;
        let eval = |(k, c): (usize, &ClientState)| {
            c.evaluate_delta(&deltas[k]).map_err(|e| Error::InRound {
                round: t,
                client: k,
                source: Box::new(e),
            })
        };
        let losses: Vec<(f64, f64)> = if self.parallel_clients {
            clients
                .par_iter()
                .enumerate()
                .map(eval)
                .collect::<Result<_>>()?
        } else {
            clients
                .iter()
                .enumerate()
                .map(eval)
                .collect::<Result<_>>()?
        };
        let train_losses: Vec<f64> = losses.iter().map(|l| l.0).collect();
        let objective = metrics::objective_from_losses(
            &train_losses,
            &self.deltas,
            &self.graph,
            self.strategy.lambda,
        )?;
        let per_client = losses
            .iter()
            .enumerate()
            .map(|(id, &(train_loss, test_loss))| ClientMetrics {
                id,
                train_loss,
                test_loss,
                sampled: selected[id],
            })
            .collect();
        Ok(RoundReport {
            round: t,
            objective,
            per_client,
            sampled,
            up_bytes: up,
            down_bytes: down,
            cum_up_bytes: self.cum_up,
            cum_down_bytes: self.cum_down,
        })
    }

    /// Run `rounds` communication rounds, calling `hook` after each.
    pub fn run(
        &mut self,
        rounds: usize,
        local_steps: usize,
        clients: &mut [ClientState],
        hook: &mut dyn RoundHook,
    ) -> Result<Vec<RoundReport>> {
        if rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if local_steps == 0 {
            return Err(Error::InvalidConfig("local steps must be >= 1".into()));
        }
        let mut reports = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let before = self.deltas.clone();
            let report = self.step(clients, local_steps)?;
            hook.on_round(&report, &before, &self.deltas);
            reports.push(report);
        }
        Ok(reports)
    }
}
