//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use mira_core::graph::TaskGraph;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random symmetric weights with a zero diagonal, built directly.
#[allow(clippy::needless_range_loop)]
pub fn random_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = if rng.random_bool(0.7) {
                rng.random_range(0.0..2.0)
            } else {
                0.0
            };
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    w
}

pub fn random_stack(k: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..p).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

/// Dense Laplacian from raw weights.
pub fn dense_laplacian(w: &[Vec<f64>]) -> DMatrix<f64> {
    let k = w.len();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            (0..k).filter(|&l| l != i).map(|l| w[i][l]).sum()
        } else {
            -w[i][j]
        }
    })
}

/// Explicit `L ⊗ I_p`.
pub fn kron_identity(lap: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    lap.kronecker(&DMatrix::<f64>::identity(p, p))
}

pub fn stack_vector(stack: &[Vec<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        stack.iter().map(Vec::len).sum(),
        stack.iter().flatten().copied(),
    )
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn graph_of(w: &[Vec<f64>]) -> TaskGraph {
    TaskGraph::new(w).unwrap()
}

/// Central differences of `f` at `theta` with step `h`.
pub fn central_differences(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with the guard denominator used throughout the suite.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

use mira_core::client::ClientState;
use mira_core::model::{AdaptedModel, ModelSpec};
use mira_core::server::{AggregationStrategy, ServerState};
use mira_core::tasks::{generate_universe, similarity_from_truth, UniverseConfig};

/// Small end-to-end federation: clustered regression, truth-derived graph,
/// one shared adapter initialization.
pub fn federation(
    clients: usize,
    fraction: f64,
    strategy: AggregationStrategy,
    local_lr: f64,
    seed: u64,
) -> (Vec<ClientState>, ServerState) {
    let cfg = UniverseConfig {
        clients,
        clusters: 2.min(clients),
        dim: 5,
        out_dim: 3,
        n_train: 12,
        n_test: 20,
        seed,
        ..Default::default()
    };
    let (universe, data) = generate_universe(&cfg).unwrap();
    let graph = similarity_from_truth(&universe, 4.0).unwrap();
    let spec = ModelSpec::new(vec![5, 4, 3], 2).with_init_scale(0.3);
    let model = AdaptedModel::build(spec, seed + 1, seed + 2).unwrap();
    let states: Vec<ClientState> = data
        .into_iter()
        .enumerate()
        .map(|(k, d)| ClientState::new(k, model.clone(), d, local_lr, 4, seed * 1000 + k as u64))
        .collect();
    let server = ServerState::new(graph, strategy, fraction, seed + 3, &states).unwrap();
    (states, server)
}
