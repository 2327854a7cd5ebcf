use std::path::PathBuf;

use dca_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DcaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("channel plumbing mismatch at {boundary}: {detail}")]
    Plumbing { boundary: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss { iteration: usize, last_good: Option<PathBuf> },
    #[error("non-finite function value at probe {probe}")]
    NonFiniteProbe { probe: String },
    #[error("function is not differentiable at {probe}")]
    NotDifferentiable { probe: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T, E = DcaError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> DcaError {
    DcaError::InvalidArgument(msg.into())
}
