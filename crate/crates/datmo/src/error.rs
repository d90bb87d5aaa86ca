//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter set fails its own invariants (bad cell size, even
    /// neighborhood, non-positive thresholds, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller broke an operation's precondition (mismatched grid specs,
    /// non-positive dt, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data cannot be parsed or is structurally inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical step could not be completed (singular innovation, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
