use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unknown level {value:?} for variable `{variable}` at unit {unit}")]
    UnknownLevel {
        variable: String,
        value: String,
        unit: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank-deficient design; aliased terms: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("separation detected in logistic fit: |{term}| = {value:.3}")]
    Separation { term: String, value: f64 },

    #[error("margin {variable}={level} has positive target but no sample mass")]
    StructuralZero { variable: String, level: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("cannot read or write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Schema(_)
            | Error::UnknownLevel { .. }
            | Error::Data(_)
            | Error::StructuralZero { .. }
            | Error::Io { .. }
            | Error::Csv(_) => ErrorKind::Data,
            Error::RankDeficient(_)
            | Error::Separation { .. }
            | Error::Numerical(_)
            | Error::Convergence(_) => ErrorKind::Numerical,
        }
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
