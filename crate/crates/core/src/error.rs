use thiserror::Error;

/// Errors raised by the library. Configuration problems carry the offending key
/// so the CLI can point at it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("objective value {value} below declared floor {floor} at theta = {theta:?}")]
    FloorViolated { theta: Vec<f64>, value: f64, floor: f64 },

    #[error("non-finite value at theta = {theta:?}")]
    NonFinite { theta: Vec<f64> },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e}, last iterate {last:?})")]
    NotConverged { iterations: usize, residual: f64, last: Vec<f64> },

    #[error("run diverged at iteration {0}")]
    Diverged(u64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
