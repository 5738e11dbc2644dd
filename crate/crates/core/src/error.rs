use std::path::PathBuf;

use sstn_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum SstnError {
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse { path: PathBuf, offset: u64, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl SstnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SstnError::Io { path: path.into(), source }
    }

    /// Configuration and parse failures are the caller's fault; everything
    /// else is a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            SstnError::Config(_) | SstnError::Parse { .. } | SstnError::Tensor(TensorError::Checkpoint { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, SstnError>;
