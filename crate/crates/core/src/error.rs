use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RcaError>;

#[derive(Debug, Error)]
pub enum RcaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("non-finite value in loss term {term} at step {step}: {value}")]
    NonFinite {
        term: &'static str,
        step: usize,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RcaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RcaError::Io {
            path: path.into(),
            source,
        }
    }
}
