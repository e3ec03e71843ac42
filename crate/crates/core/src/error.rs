use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("row {row} rejected: every source sentence is missing")]
    RejectedRow { row: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("plan error at line {line}: {message}")]
    Plan { line: usize, message: String },

    #[error("no usable rows for task {0}")]
    EmptyTask(String),

    #[error("non-finite loss at batch {batch} (seed {seed})")]
    NonFiniteLoss { batch: usize, seed: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (files, plans, configuration)
    /// rather than by a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Alignment(_)
                | Error::UnknownLanguage(_)
                | Error::Plan { .. }
                | Error::EmptyTask(_)
                | Error::Format(_)
        )
    }
}
