use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{kind}: non-finite value in output")]
    NonFinite { kind: &'static str },
    #[error("{kind}: {message}")]
    InvalidArgument { kind: &'static str, message: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; clear gradients first")]
    BackwardTwice,
    #[error("checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;
