use std::path::PathBuf;

use cardio_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("label schema error: {0}")]
    Schema(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
