//! Experiment runner and self-verification entry points behind the `mira`
//! binary.

// NaN-rejecting checks are written as negated comparisons on purpose, and
// matrix code reads best with explicit index loops.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod experiment;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Run(#[from] mira_core::Error),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(e) if e.is_divergence() => 3,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
