use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("row ({action}, {state}) sums to {sum} (deviation {deviation:e})")]
    RowSum {
        action: usize,
        state: usize,
        sum: f64,
        deviation: f64,
    },
    #[error("negative probability {value} at (action {action}, state {state}, next {next})")]
    NegativeProbability {
        action: usize,
        state: usize,
        next: usize,
        value: f64,
    },
    #[error("discount factor {0} is outside [0, 1)")]
    InvalidDiscount(f64),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular linear system in {0}")]
    Singular(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible point: norm {norm} exceeds radius {radius}")]
    Infeasible { norm: f64, radius: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("start state mismatch at episode {0}")]
    StartStateMismatch(usize),
    #[error("horizon {horizon} exceeds episode length {length}")]
    HorizonTooLong { horizon: usize, length: usize },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("failed to parse MDP definition: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
