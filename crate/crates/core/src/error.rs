use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph weights are asymmetric at ({row}, {col})")]
    AsymmetricWeights { row: usize, col: usize },

    #[error("graph weight at ({row}, {col}) is negative or not finite")]
    NegativeWeight { row: usize, col: usize },

    #[error("graph diagonal entry {index} is nonzero")]
    NonzeroDiagonal { index: usize },

    #[error("need at least 2 clients, got {count}")]
    TooFewClients { count: usize },

    #[error("weight matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },

    #[error("graph has no edges (all weights zero)")]
    ZeroDegreeGraph,

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("cache was produced for different parameters than the model now holds")]
    StaleCache,

    #[error("client {client} has an empty dataset")]
    EmptyDataset { client: usize },

    #[error("client {client} diverged: loss {loss}")]
    Divergence { client: usize, loss: f64 },

    #[error("no delta provided for client {client}")]
    MissingClient { client: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("round {round}, client {client}: {source}")]
    InRound {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for runtime divergence (non-finite or exploding loss), possibly
    /// wrapped in round context.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::NonFiniteLoss | Error::Divergence { .. } => true,
            Error::InRound { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
