use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch,
    /// negative scale coefficient, malformed layout, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value or a factorization failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An experiment or benchmark description could not be resolved.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tabular input could not be ingested.
    #[error("{path}: {message}")]
    Ingest { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
