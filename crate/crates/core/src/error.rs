use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate. Every message is prefixed with the
/// module that produced it so CLI users can tell where a run failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("[tensor] {op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("[tensor] invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("[tensor] softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("[tensor] backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("[tensor] STT1 decode: {0}")]
    Format(String),

    #[error("[graph] {0}")]
    Graph(String),

    #[error("[temporal] {0}")]
    Temporal(String),

    #[error("[temporal] state diverged: |h| = {magnitude:e} at step {step}")]
    DivergentState { step: usize, magnitude: f64 },

    #[error("[model] {0}")]
    Model(String),

    #[error("[data] {0}")]
    Data(String),

    #[error("[train] {0}")]
    Train(String),

    #[error("[train] loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("[metrics] {0}")]
    Metrics(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
