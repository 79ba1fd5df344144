//! Minimal CPU network engine: NCHW tensors, im2col convolutions and
//! explicit backward passes.

pub mod graph;
pub mod layers;
pub mod loss;
pub mod tensor;

pub use graph::{Concat, Residual, Sequential, Shortcut};
pub use layers::{BatchNorm2d, Census, Conv2d, Dense, Flatten, GlobalAvgPool, Layer, LayerKind, Param, Pool2d, PoolMode, Relu, Standardize};
pub use loss::{softmax, softmax_cross_entropy};
pub use tensor::{gemm, Scalar, Tensor};
