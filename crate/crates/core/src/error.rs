use thiserror::Error;

/// Errors produced by the simulator and training stack.
#[derive(Debug, Error)]
pub enum SqnError {
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("mask has no valid entry")]
    EmptyMask,
    #[error("allocation assigns packets to a zero-probability class")]
    ImpossibleOutcome,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("intervention policy not observed stabilizing: no bucket with nonpositive drift")]
    NotStabilizing,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SqnError>;
