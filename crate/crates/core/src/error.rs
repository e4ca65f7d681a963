use std::path::PathBuf;

use linesight_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("image geometry: {0}")]
    Geometry(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("sequence of {len} positions exceeds the context length {context}{}", sample.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Length {
        len: usize,
        context: usize,
        sample: Option<String>,
    },

    #[error("image splice: {0}")]
    Splice(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data mix: {0}")]
    Mix(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("caption record for {captions} joined with detections for {detections}")]
    Join { captions: String, detections: String },

    #[error("chat backend: {0}")]
    Backend(String),

    #[error("evaluation: {0}")]
    Eval(String),
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
