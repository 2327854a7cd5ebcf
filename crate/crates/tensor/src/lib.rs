//! Minimal CPU tensor library with a reverse-mode tape, sized for training
//! small segmentation networks and checking their gradients in `f64`.

pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use kernels::Conv2dSpec;
pub use params::{BnIds, ParamId, ParamKind, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tape::{BnUpdate, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
