use std::path::PathBuf;

use crate::model::GateKind;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid mixing measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{op} does not support the {gate} gate")]
    UnsupportedGate { gate: GateKind, op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The M-step could not find any ascent step down to the minimal step size.
    #[error("no ascent step found in the M-step")]
    NoAscent,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: malformed record: {msg}")]
    Record { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
