use std::path::PathBuf;

use cat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary mismatch: checkpoint vocab hash {checkpoint}, data expects {expected}")]
    VocabMismatch { checkpoint: String, expected: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0}")]
    Metric(String),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

pub type Result<T, E = CatError> = std::result::Result<T, E>;

impl CatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn contract<S: Into<String>>(msg: S) -> CatError {
    CatError::Contract(msg.into())
}
