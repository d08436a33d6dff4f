use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum KbseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("factorization failed at jitter cap {jitter:e} (condition estimate {condition:e})")]
    Factorization { jitter: f64, condition: f64 },

    #[error("no unsafe samples: barrier levels cannot be established")]
    NoUnsafeSamples,

    #[error("no safe samples: every labelled state is unsafe")]
    NoSafeSamples,

    #[error("invalid barrier: nu = {nu} must exceed eta = {eta} and be positive")]
    InvalidBarrier { eta: f64, nu: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt checkpoint: field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KbseError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(KbseError::DimensionMismatch { expected, got });
    }
    Ok(())
}
