use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid groups: {0}")]
    InvalidGroups(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid label {label} (expected < {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid tape: {0}")]
    InvalidTape(String),
    #[error("invalid supernet spec: {0}")]
    InvalidSpec(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid slice: {0}")]
    InvalidSlice(String),
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("latency table has no entry for block {block} gene {gene}")]
    IncompleteTable { block: usize, gene: String },
    #[error("infeasible sampler: {0}")]
    InfeasibleSampler(String),
    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),
    #[error("degenerate archive: {0}")]
    DegenerateArchive(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
