//! Error taxonomy shared by the numeric core.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A construction-time setting is invalid (bad schedule range, odd
    /// embedding dim, enumeration cap exceeded, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A caller violated an operation contract (non-scalar loss, missing
    /// gradient, timestep out of range, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A loss normalizer has (near-)zero variance.
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    /// A non-finite value was produced where finiteness is guaranteed.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// Rejection sampling gave up.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed persisted bytes; offset is where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
