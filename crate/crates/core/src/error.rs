//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, GexError>;

#[derive(Debug, thiserror::Error)]
pub enum GexError {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Incompatible tensor/matrix shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A data file could not be parsed.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint corruption or version mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Non-finite values, non-convergence, or an undefined statistic.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl GexError {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            GexError::Contract(_) | GexError::Dim(_) | GexError::Config(_) => 2,
            GexError::Parse { .. } | GexError::Io(_) | GexError::Integrity(_) => 3,
            GexError::Numerical(_) => 4,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> GexError {
    GexError::Contract(msg.into())
}

pub(crate) fn dim(msg: impl Into<String>) -> GexError {
    GexError::Dim(msg.into())
}
