use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {msg} (byte offset {offset})")]
    Checkpoint { path: String, offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
