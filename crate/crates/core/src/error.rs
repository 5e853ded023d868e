use std::path::PathBuf;

/// Errors produced by the simulator and its building blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two operands that must share a shape do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A gradient or update produced NaN/Inf.
    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: u64 },

    /// Broken internal bookkeeping (e.g. a weight history that is too shallow).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed trajectory file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
