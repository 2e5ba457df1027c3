//! Dense CPU tensors with a tape-based reverse-mode autodiff.
//!
//! Only the operations a convolutional image generator needs are provided:
//! strided 2-D convolution (zero or reflect padding), nearest up-sampling,
//! pooling, instance normalisation, per-channel affine modulation, dense
//! layers, Gram matrices and a handful of pointwise maps and reductions.
//! Every op is generic over [`Scalar`] so gradients can be checked in `f64`
//! against the `f32` training path.

pub mod conv;
mod error;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use conv::PadMode;
pub use error::{Result, TensorError};
pub use graph::{bce_term, sigmoid, Gradients, Graph, Trainable, Var};
pub use params::ParamSet;
pub use scalar::{gemm, MatView, Scalar};
pub use tensor::Tensor;
