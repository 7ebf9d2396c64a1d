//! Numerical kernels. Every function here is pure over its inputs.

pub mod conv;
pub(crate) mod gemm;
pub mod norm;
pub mod ops;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNormGrads, BatchNormSaved, RunningStats};
pub use ops::{add, concat_channels, linear, relu, softmax, softmax_cross_entropy, split_channels};
pub use pool::{avg_pool2, global_avg_pool, max_pool2};
