use std::path::PathBuf;

use thiserror::Error;
use vpbsd_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stitching error: {0}")]
    Stitch(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input or configuration rather than
    /// by the computation itself.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Config(_) | Error::Validation(_) | Error::Generation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
