use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; run a new forward pass first")]
    BackwardConsumed,
    #[error("node does not participate in the gradient graph")]
    NoGraph,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid growth request: {0}")]
    Growth(String),
    #[error("invalid growth plan: {0}")]
    Plan(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
