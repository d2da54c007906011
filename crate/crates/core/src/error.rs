use thiserror::Error;

use crate::spacetime::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the simulator layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("causality violation: {0}")]
    Causality(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid geometry configuration:\n{0}")]
    GeometryInvalid(ValidationReport),

    #[error("state error: {0}")]
    State(String),

    #[error("unsupported strategy: {0}")]
    UnsupportedStrategy(String),

    #[error("sampling budget exhausted: {0}")]
    SamplingBudget(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
