//! Dense kernels with hand-derived backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gemm;
pub mod upsample;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormParams, Mode};
pub use conv::{
    conv2d_backward, conv2d_forward, transposed_conv2d_backward, transposed_conv2d_forward, ConvGrads,
    ConvParams,
};
pub use upsample::{bilinear_upsample2x, bilinear_upsample2x_backward};
