//! Federated multi-task fine-tuning over LoRA-adapted models.
//!
//! Each client owns a personalized low-rank adapter on top of a shared frozen
//! base. After local training the server couples clients through a task
//! similarity graph, pulling every sampled client toward its neighbours with a
//! graph Laplacian step. Averaging (single global model) and local-only
//! training are provided as baselines.
//!
//! Module map:
//! - [`graph`] similarity graph, Laplacian algebra, regularizer
//! - [`lora`] low-rank adapter over a frozen linear map
//! - [`model`] stack of adapted layers with loss heads and manual backprop
//! - [`tasks`] synthetic clustered multi-task data
//! - [`client`] local training loop and evaluation
//! - [`server`] sampling, aggregation strategies and the round loop
//! - [`metrics`] objective decomposition and cost accounting

// NaN-rejecting checks are written as negated comparisons on purpose, and
// matrix code reads best with explicit index loops.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod client;
pub mod error;
pub mod graph;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod server;
pub mod tasks;

pub use error::{Error, Result};
