use thiserror::Error;

/// Errors raised by the pruning engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("node {node} ({name}): {message}")]
    Node {
        node: usize,
        name: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive sigma {sigma} at channel {channel}")]
    NonPositiveSigma { channel: usize, sigma: f64 },

    #[error("compactor fully pruned (target layer {layer})")]
    FullyPruned { layer: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("data format: {message} (byte offset {offset})")]
    DataFormat { message: String, offset: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: impl Into<String>, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        context: context.into(),
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
