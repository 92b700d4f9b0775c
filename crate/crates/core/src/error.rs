use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("non-finite value in {what} (layer {layer}, timestep {timestep})")]
    NonFinite {
        what: &'static str,
        layer: usize,
        timestep: usize,
    },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged {
        iteration: u64,
        loss: f64,
        /// Best checkpoint seen before the divergence, if any epoch finished.
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },

    #[error("invalid UTF-8 in {path} at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },

    #[error("malformed {kind}: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("inconsistent inputs: {0}")]
    Mismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
