use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),

    #[error("output node {0} is not a 1x1 scalar")]
    NonScalarOutput(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss in fold {fold}")]
    FoldDiverged { fold: usize },

    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("input outside the forward function's domain: {0}")]
    Domain(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
