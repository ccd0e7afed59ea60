//! Objective decomposition `J = F + λR` and communication/memory accounting.

use crate::client::ClientState;
use crate::error::Result;
use crate::graph::TaskGraph;
use crate::model::ModelSpec;
use crate::server::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// `J = F + λR`
    pub total: f64,
    /// `F = Σ_k f_k`, the sum of client train losses.
    pub loss: f64,
    /// `R`, the Laplacian regularizer over client deltas.
    pub regularizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub id: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub objective: Objective,
    pub per_client: Vec<ClientMetrics>,
    pub sampled: Vec<usize>,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub cum_up_bytes: u64,
    pub cum_down_bytes: u64,
}

impl RoundReport {
    pub fn mean_train(&self) -> f64 {
        mean(self.per_client.iter().map(|c| c.train_loss))
    }

    pub fn mean_test(&self) -> f64 {
        mean(self.per_client.iter().map(|c| c.test_loss))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// `J`, `F` and `R` from already-evaluated train losses.
pub fn objective_from_losses<V: AsRef<[f64]>>(
    train_losses: &[f64],
    deltas: &[V],
    graph: &TaskGraph,
    lambda: f64,
) -> Result<Objective> {
    let loss: f64 = train_losses.iter().sum();
    let regularizer = graph.regularization_value(deltas)?;
    Ok(Objective {
        total: loss + lambda * regularizer,
        loss,
        regularizer,
    })
}

/// Evaluate every client under its stored delta and decompose the objective.
pub fn objective<V: AsRef<[f64]>>(
    clients: &[ClientState],
    deltas: &[V],
    graph: &TaskGraph,
    lambda: f64,
) -> Result<Objective> {
    let losses = clients
        .iter()
        .zip(deltas)
        .map(|(c, d)| c.evaluate_delta(d.as_ref()).map(|(train, _)| train))
        .collect::<Result<Vec<_>>>()?;
    objective_from_losses(&losses, deltas, graph, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub bytes_per_param: u64,
    /// Optimizer state bytes; plain SGD keeps none.
    pub optimizer_bytes: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            bytes_per_param: 8,
            optimizer_bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCost {
    /// `C_w`, the frozen base.
    pub base: u64,
    /// `Ĉ_Δw`, the trainable adapter.
    pub trainable: u64,
    /// `O`, optimizer state.
    pub optimizer: u64,
}

impl MemoryCost {
    pub fn total(&self) -> u64 {
        self.base + self.trainable + self.optimizer
    }
}

/// Per-round `(upload, download)` bytes. Only deltas travel, in both
/// directions, and only for sampled clients.
pub fn round_comm_cost(
    spec: &ModelSpec,
    sampled_count: usize,
    kind: StrategyKind,
    cost: &CostModel,
) -> (u64, u64) {
    match kind {
        StrategyKind::LocalOnly => (0, 0),
        StrategyKind::Mira | StrategyKind::FedAvg => {
            let bytes = sampled_count as u64 * spec.trainable_count() as u64 * cost.bytes_per_param;
            (bytes, bytes)
        }
    }
}

/// Per-client memory `C_w + Ĉ_Δw + O`.
pub fn memory_cost(spec: &ModelSpec, cost: &CostModel) -> MemoryCost {
    MemoryCost {
        base: spec.frozen_count() as u64 * cost.bytes_per_param,
        trainable: spec.trainable_count() as u64 * cost.bytes_per_param,
        optimizer: cost.optimizer_bytes,
    }
}
