//! Self-verification suites: finite-difference gradient checks and the
//! aggregation/Laplacian oracle checks. Oracles here are built from dense
//! matrices and never call the blockwise Laplacian code under test.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mira_core::graph::TaskGraph;
use mira_core::model::{Activation, AdaptedModel, Head, ModelSpec};
use mira_core::seed;
use mira_core::server::{mira_update, NeighborMode};

pub const GRAD_TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const GRAD_DIMS: [usize; 3] = [5, 6, 4];
const GRAD_RANK: usize = 2;
const GRAD_BATCH: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub seeds: u64,
    /// Flip the sign of every `grad_A` entry before comparing.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComboResult {
    pub activation: Activation,
    pub head: Head,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub worst_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub combos: Vec<ComboResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.combos
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.combos.iter().all(|c| c.max_rel_err < GRAD_TOLERANCE)
    }

    pub fn worst(&self) -> Option<&ComboResult> {
        self.combos
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.combos {
            writeln!(
                f,
                "{:<6} {:<12} max rel err {:.3e} (layer {}, seed {})",
                c.activation, c.head, c.max_rel_err, c.worst_layer, c.worst_seed
            )?;
        }
        write!(
            f,
            "overall max rel err {:.3e}, tolerance {:e}",
            self.max_rel_err(),
            GRAD_TOLERANCE
        )
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn targets(rng: &mut ChaCha8Rng, head: Head, n: usize, c: usize) -> Array2<f64> {
    match head {
        Head::Mse => Array2::from_shape_vec((n, c), uniform(rng, n * c, -1.0, 1.0)).expect("shape"),
        Head::SoftmaxXent => {
            let mut y = Array2::zeros((n, c));
            for i in 0..n {
                y[[i, rng.random_range(0..c)]] = 1.0;
            }
            y
        }
    }
}

/// Worst `(rel_err, layer)` for one model instance.
fn check_instance(
    activation: Activation,
    head: Head,
    seed_value: u64,
    inject_fault: bool,
) -> (f64, usize) {
    let spec = ModelSpec::new(GRAD_DIMS.to_vec(), GRAD_RANK)
        .with_activation(activation)
        .with_head(head);
    let mut rng = seed::rng_for(seed_value, 0x6772_6164);
    let mut model = AdaptedModel::build(spec, seed_value, seed_value ^ 1).expect("valid spec");
    // Both factors nonzero so every gradient block is exercised.
    let theta = uniform(&mut rng, model.trainable_count(), -0.8, 0.8);
    model.load_trainable(&theta).expect("length");
    let x = Array2::from_shape_vec(
        (GRAD_BATCH, GRAD_DIMS[0]),
        uniform(&mut rng, GRAD_BATCH * GRAD_DIMS[0], -1.0, 1.0),
    )
    .expect("shape");
    let y = targets(&mut rng, head, GRAD_BATCH, GRAD_DIMS[2]);

    let (_, cache) = model.forward_loss(x.view(), y.view()).expect("finite loss");
    let mut analytic = model.backward(&cache).expect("fresh cache");

    let mut layer_of = Vec::with_capacity(analytic.len());
    let mut offset = 0;
    for (l, w) in GRAD_DIMS.windows(2).enumerate() {
        let (v, d) = (w[0], w[1]);
        let b_len = d * GRAD_RANK;
        let a_len = GRAD_RANK * v;
        if inject_fault {
            for g in &mut analytic[offset + b_len..offset + b_len + a_len] {
                *g = -*g;
            }
        }
        layer_of.extend(std::iter::repeat_n(l, b_len + a_len));
        offset += b_len + a_len;
    }

    let mut probe = model.clone();
    let mut point = theta.clone();
    let mut worst = (0.0, 0);
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + FD_STEP;
        probe.load_trainable(&point).expect("length");
        let up = probe.loss(x.view(), y.view()).expect("finite");
        point[i] = orig - FD_STEP;
        probe.load_trainable(&point).expect("length");
        let down = probe.loss(x.view(), y.view()).expect("finite");
        point[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        if e > worst.0 {
            worst = (e, layer_of[i]);
        }
    }
    worst
}

/// Finite-difference check across both heads and both activations.
pub fn grad_check(opts: &GradCheckOptions) -> GradCheckReport {
    let mut combos = Vec::new();
    for head in [Head::Mse, Head::SoftmaxXent] {
        for activation in [Activation::Tanh, Activation::Relu] {
            let mut res = ComboResult {
                activation,
                head,
                max_rel_err: 0.0,
                worst_seed: 0,
                worst_layer: 0,
            };
            for s in 0..opts.seeds {
                let (e, layer) = check_instance(activation, head, s, opts.inject_fault);
                if e > res.max_rel_err {
                    res.max_rel_err = e;
                    res.worst_seed = s;
                    res.worst_layer = layer;
                }
            }
            combos.push(res);
        }
    }
    GradCheckReport { combos }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleOptions {
    pub seed: u64,
    /// Run the contraction trials at `factor × safe_step_bound` instead of a
    /// step drawn inside the bound.
    pub contraction_step_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub cases: usize,
    /// Largest observed deviation, in the property's own units.
    pub worst: f64,
    pub tolerance: f64,
    pub failure: Option<String>,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub properties: Vec<PropertyOutcome>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyOutcome::passed)
    }

    pub fn first_failure(&self) -> Option<&PropertyOutcome> {
        self.properties.iter().find(|p| !p.passed())
    }

    pub fn get(&self, name: &str) -> Option<&PropertyOutcome> {
        self.properties.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let status = if p.passed() { "ok  " } else { "FAIL" };
            write!(
                f,
                "{status} {:<22} {:>4} cases  worst {:.3e}  tol {:e}",
                p.name, p.cases, p.worst, p.tolerance
            )?;
            if let Some(msg) = &p.failure {
                write!(f, "\n     {msg}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const LAPLACIAN_IDENTITY: &str = "laplacian_identity";
pub const SERVER_UPDATE: &str = "server_update_kronecker";
pub const ZERO_LAMBDA: &str = "zero_lambda_noop";
pub const COMPLETE_GRAPH_MEAN: &str = "complete_graph_mean";
pub const CARRY_FORWARD: &str = "carry_forward";
pub const SPECTRAL_BOUND: &str = "safe_bound_spectral";
pub const CONTRACTION: &str = "contraction";

struct Instance {
    weights: Vec<Vec<f64>>,
    graph: TaskGraph,
    stack: Vec<Vec<f64>>,
}

fn random_instance(rng: &mut ChaCha8Rng, max_k: usize, max_p: usize) -> Instance {
    loop {
        let k = rng.random_range(2..=max_k);
        let p = rng.random_range(1..=max_p);
        let mut weights = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                if rng.random_bool(0.7) {
                    let w = rng.random_range(0.0..2.0);
                    weights[i][j] = w;
                    weights[j][i] = w;
                }
            }
        }
        if weights.iter().flatten().all(|&w| w == 0.0) {
            continue;
        }
        let graph = TaskGraph::new(&weights).expect("generated weights are valid");
        let stack = (0..k).map(|_| uniform(rng, p, -1.0, 1.0)).collect();
        return Instance {
            weights,
            graph,
            stack,
        };
    }
}

/// `(L ⊗ I_p)` from raw weights.
fn dense_extended_laplacian(weights: &[Vec<f64>], p: usize) -> DMatrix<f64> {
    let k = weights.len();
    let m = DMatrix::from_fn(k, k, |i, j| weights[i][j]);
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        (0..k).map(|i| weights[i].iter().sum()),
    ));
    (d - m).kronecker(&DMatrix::<f64>::identity(p, p))
}

fn stacked(stack: &[Vec<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        stack.iter().map(Vec::len).sum(),
        stack.iter().flatten().copied(),
    )
}

fn all_fresh(stack: &[Vec<f64>]) -> BTreeMap<usize, Vec<f64>> {
    stack.iter().cloned().enumerate().collect()
}

fn max_degree(weights: &[Vec<f64>]) -> f64 {
    weights
        .iter()
        .map(|r| r.iter().sum::<f64>())
        .fold(0.0, f64::max)
}

fn outcome(
    name: &'static str,
    cases: usize,
    worst: f64,
    tolerance: f64,
    failure: Option<String>,
) -> PropertyOutcome {
    PropertyOutcome {
        name,
        cases,
        worst,
        tolerance,
        failure,
    }
}

pub fn laplacian_identity(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    const TOL: f64 = 1e-10;
    let mut worst = 0.0f64;
    let mut failure = None;
    for case in 0..100 {
        let inst = random_instance(rng, 8, 32);
        let p = inst.stack[0].len();
        let w = stacked(&inst.stack);
        let quad = w.dot(&(dense_extended_laplacian(&inst.weights, p) * &w));
        let pairwise = inst
            .graph
            .regularization_value(&inst.stack)
            .expect("consistent shapes");
        let err = (pairwise - quad).abs() / quad.abs().max(1e-300);
        worst = worst.max(err);
        if err >= TOL && failure.is_none() {
            failure = Some(format!(
                "case {case}: pairwise {pairwise} vs quadratic form {quad}"
            ));
        }
    }
    outcome(LAPLACIAN_IDENTITY, 100, worst, TOL, failure)
}

pub fn server_update(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    const TOL: f64 = 1e-12;
    let mut worst = 0.0f64;
    let mut failure = None;
    for case in 0..50 {
        let inst = random_instance(rng, 8, 16);
        let k = inst.stack.len();
        let p = inst.stack[0].len();
        let step = rng.random_range(0.0..1.0) / (2.0 * max_degree(&inst.weights));
        let w = stacked(&inst.stack);
        let expected = (DMatrix::<f64>::identity(k * p, k * p)
            - dense_extended_laplacian(&inst.weights, p) * step)
            * &w;
        for mode in [NeighborMode::AllStale, NeighborMode::SampledOnly] {
            let got = mira_update(
                &inst.graph,
                &inst.stack,
                &all_fresh(&inst.stack),
                step,
                mode,
            )
            .expect("valid inputs");
            let err = got
                .iter()
                .flatten()
                .zip(expected.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
            if err >= TOL && failure.is_none() {
                failure = Some(format!(
                    "case {case} ({}): max abs diff {err:e}",
                    mode.as_str()
                ));
            }
        }
    }
    outcome(SERVER_UPDATE, 50, worst, TOL, failure)
}

fn random_subset(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let picked: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
    if picked.is_empty() {
        vec![rng.random_range(0..k)]
    } else {
        picked
    }
}

pub fn zero_lambda(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    let mut failure = None;
    let cases = 50;
    for case in 0..cases {
        let inst = random_instance(rng, 8, 16);
        let k = inst.stack.len();
        let fresh: BTreeMap<usize, Vec<f64>> = random_subset(rng, k)
            .into_iter()
            .map(|i| (i, uniform(rng, inst.stack[0].len(), -1.0, 1.0)))
            .collect();
        for mode in [NeighborMode::AllStale, NeighborMode::SampledOnly] {
            let got =
                mira_update(&inst.graph, &inst.stack, &fresh, 0.0, mode).expect("valid inputs");
            let ok = got.iter().enumerate().all(|(i, d)| {
                let want = fresh.get(&i).unwrap_or(&inst.stack[i]);
                d.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits())
            });
            if !ok && failure.is_none() {
                failure = Some(format!(
                    "case {case} ({}): output differs from inputs",
                    mode.as_str()
                ));
            }
        }
    }
    outcome(ZERO_LAMBDA, cases, 0.0, 0.0, failure)
}

pub fn complete_graph_mean(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    const TOL: f64 = 1e-12;
    let mut worst = 0.0f64;
    let mut failure = None;
    let cases = 50;
    for case in 0..cases {
        let k = rng.random_range(2..=8);
        let p = rng.random_range(1..=16);
        let weights: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        let graph = TaskGraph::new(&weights).expect("valid");
        let stack: Vec<Vec<f64>> = (0..k).map(|_| uniform(rng, p, -1.0, 1.0)).collect();
        let mean: Vec<f64> = (0..p)
            .map(|j| stack.iter().map(|d| d[j]).sum::<f64>() / k as f64)
            .collect();
        let got = mira_update(
            &graph,
            &stack,
            &all_fresh(&stack),
            1.0 / k as f64,
            NeighborMode::AllStale,
        )
        .expect("valid inputs");
        let err = got
            .iter()
            .flat_map(|d| d.iter().zip(&mean).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if err >= TOL && failure.is_none() {
            failure = Some(format!(
                "case {case} (K={k}): max abs diff from mean {err:e}"
            ));
        }
    }
    outcome(COMPLETE_GRAPH_MEAN, cases, worst, TOL, failure)
}

pub fn carry_forward(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    let mut failure = None;
    let cases = 50;
    for case in 0..cases {
        let inst = random_instance(rng, 8, 16);
        let k = inst.stack.len();
        let subset = random_subset(rng, k);
        let fresh: BTreeMap<usize, Vec<f64>> = subset
            .iter()
            .map(|&i| (i, uniform(rng, inst.stack[0].len(), -1.0, 1.0)))
            .collect();
        let step = rng.random_range(0.0..1.0) / (2.0 * max_degree(&inst.weights));
        for mode in [NeighborMode::AllStale, NeighborMode::SampledOnly] {
            let got =
                mira_update(&inst.graph, &inst.stack, &fresh, step, mode).expect("valid inputs");
            let bad = (0..k).filter(|i| !fresh.contains_key(i)).find(|&i| {
                got[i]
                    .iter()
                    .zip(&inst.stack[i])
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            });
            if let (Some(i), None) = (bad, &failure) {
                failure = Some(format!(
                    "case {case} ({}): non-sampled client {i} changed",
                    mode.as_str()
                ));
            }
        }
    }
    outcome(CARRY_FORWARD, cases, 0.0, 0.0, failure)
}

pub fn spectral_bound(rng: &mut ChaCha8Rng) -> PropertyOutcome {
    const TOL: f64 = 1e-10;
    let mut worst = 0.0f64;
    let mut failure = None;
    let cases = 100;
    for case in 0..cases {
        let inst = random_instance(rng, 8, 1);
        let eig = dense_extended_laplacian(&inst.weights, 1)
            .symmetric_eigen()
            .eigenvalues;
        let lmax = eig.max();
        let lmin = eig.min();
        let bound = inst.graph.safe_step_bound().expect("graph has edges");
        // Inside the bound every mode satisfies |1 − s·λ| ≤ 1.
        let excess = (bound * lmax - 1.0).max(-lmin);
        worst = worst.max(excess.max(0.0));
        if excess > TOL && failure.is_none() {
            failure = Some(format!(
                "case {case}: bound {bound}, eigenvalues in [{lmin}, {lmax}]"
            ));
        }
    }
    outcome(SPECTRAL_BOUND, cases, worst, TOL, failure)
}

pub fn contraction(rng: &mut ChaCha8Rng, factor: Option<f64>) -> PropertyOutcome {
    const TOL: f64 = 1e-10;
    let mut worst = 0.0f64;
    let mut failure = None;
    let cases = 100;
    for case in 0..cases {
        let inst = random_instance(rng, 8, 16);
        let bound = inst.graph.safe_step_bound().expect("graph has edges");
        let step = match factor {
            Some(f) => f * bound,
            None => rng.random_range(0.0..=1.0) * bound,
        };
        let before = inst
            .graph
            .regularization_value(&inst.stack)
            .expect("shapes");
        let next = mira_update(
            &inst.graph,
            &inst.stack,
            &all_fresh(&inst.stack),
            step,
            NeighborMode::AllStale,
        )
        .expect("valid inputs");
        let after = inst.graph.regularization_value(&next).expect("shapes");
        let growth = after - before;
        worst = worst.max(growth);
        if growth > TOL && failure.is_none() {
            let lmax = dense_extended_laplacian(&inst.weights, 1)
                .symmetric_eigen()
                .eigenvalues
                .max();
            failure = Some(format!(
                "case {case}: regularizer grew {before:.6e} -> {after:.6e} at eta*lambda = {step:.4e} \
                 (safe bound {bound:.4e}, top Laplacian mode scaled by |1 - s*lambda_max| = {:.3})",
                (1.0 - step * lmax).abs()
            ));
        }
    }
    outcome(CONTRACTION, cases, worst, TOL, failure)
}

/// Run every aggregation/Laplacian property and collect the outcomes.
pub fn oracle_check(opts: &OracleOptions) -> OracleReport {
    let mut rng = seed::rng_for(opts.seed, 0x6f72_6163);
    OracleReport {
        properties: vec![
            laplacian_identity(&mut rng),
            server_update(&mut rng),
            zero_lambda(&mut rng),
            complete_graph_mean(&mut rng),
            carry_forward(&mut rng),
            spectral_bound(&mut rng),
            contraction(&mut rng, opts.contraction_step_factor),
        ],
    }
}
