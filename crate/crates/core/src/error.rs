use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by estimation, diagnostics and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear predictor exceeded the exponential overflow guard.
    #[error("overflow: linear predictor {value} at row {row} exceeds the guard")]
    Overflow { row: usize, value: f64 },

    /// The penalized objective is unbounded below along a coordinate.
    #[error("objective is unbounded below along coordinate {coordinate}")]
    Unbounded { coordinate: usize },

    /// A Hessian block could not be inverted.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A calibration display could not be satisfied.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The family does not support the requested operation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An exhaustive check would visit too many subsets.
    #[error("combinatorial blowup: {count} subsets exceed the cap of {cap}")]
    Combinatorial { count: u128, cap: u128 },

    /// Malformed input data.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input files.
    pub fn is_ingestion(&self) -> bool {
        matches!(self, Error::Ingestion(_) | Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
