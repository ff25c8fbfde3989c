use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("too many malformed rows in {path}: {bad} of {total} (lines {lines:?})")]
    Malformed {
        path: PathBuf,
        bad: usize,
        total: usize,
        lines: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no users left after filtering to sequences of length >= {0}")]
    EmptyDataset(usize),
    #[error("sequence row {row} contains only padding")]
    EmptySequence { row: usize },
    #[error("view {0} has zero norm")]
    ZeroNorm(usize),
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("non-finite threshold output")]
    NonFiniteThreshold,
    #[error("epoch {got} logged after epoch {last}")]
    NonMonotoneEpoch { last: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
