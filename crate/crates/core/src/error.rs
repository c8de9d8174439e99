use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves (NaN, overflow,
    /// divergence) rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
