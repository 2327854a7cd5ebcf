//! Forward and backward kernels on plain tensors. The tape in [`crate::Tape`]
//! wires these together; they are also usable directly for inference.

mod conv;
mod loss;
mod norm;
mod pool;
mod resize;

pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads, Conv2dSpec};
pub use loss::{bce_with_logits, per_class_bce, softmax_channels, weighted_cross_entropy, CrossEntropy};
pub use norm::{
    batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward, BatchStats, BN_EPS,
};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, adaptive_bin, max_pool, max_pool_backward};
pub use resize::{resize_bilinear, resize_bilinear_backward};
