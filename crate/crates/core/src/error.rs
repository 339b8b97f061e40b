use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: value outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("tensors recorded on different tapes cannot be combined in {0}")]
    TapeMismatch(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{kind} magnitude {value} outside [{low}, {high}]")]
    MagnitudeOutOfRange {
        kind: &'static str,
        value: f64,
        low: f64,
        high: f64,
    },

    #[error("sub-policy {subpolicy} has non-finite logits")]
    NanLogits { subpolicy: usize },

    #[error("non-finite {stage} loss at epoch {epoch}, batch {batch}: {snapshot}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        snapshot: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
