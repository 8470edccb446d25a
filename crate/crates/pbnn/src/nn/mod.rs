//! Deterministic tensor primitives: convolution, batch normalization, ReLU,
//! affine head, pooling and softmax, each with a manual backward pass.

mod activation;
mod affine;
mod batchnorm;
mod conv;
mod matmul;
mod pool;

pub use activation::{relu, relu_backward, softmax};
pub use affine::{affine_backward, affine_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, BatchNormState, BnCache, BN_EPSILON,
    BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub(crate) use conv::conv2d_backward_opts;
pub use pool::{global_avg_pool, global_avg_pool_backward};
