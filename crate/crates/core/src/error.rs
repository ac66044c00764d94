use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("kernel side {side} exceeds image {height}x{width}")]
    KernelTooLarge {
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("empty intersection: {0}")]
    EmptyIntersection(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("stale tape: {0}")]
    StaleTape(String),
    #[error("non-finite loss component `{0}`")]
    NonFiniteComponent(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
