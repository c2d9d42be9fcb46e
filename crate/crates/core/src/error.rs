use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or model setting is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument is outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),
    /// The API was used out of order (e.g. stepping without gradients).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("validation error for {id}: {msg}")]
    Validation { id: String, msg: String },
    #[error("out-of-vocabulary text {0:?}")]
    OutOfVocabulary(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFinite { batch: String, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
