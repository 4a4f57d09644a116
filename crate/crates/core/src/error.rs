use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An op received operands whose dimensions do not fit together.
    #[error("{op}: dimension mismatch, expected {expected}, got {got:?}")]
    Dim {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("graph state: {0}")]
    State(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed file: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    /// Input data violates a precondition of the requested computation.
    #[error("{0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("stage `{stage}` failed ({}): {source}", path.display())]
    Stage {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::Dim {
            op,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}
