//! Reverse-mode automatic differentiation over dense tensors, with the 3D
//! convolution, normalization and attention building blocks needed by
//! volumetric segmentation networks.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks).

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;
mod var;

pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, MatLayout, Scalar};
pub use tensor::{numel, strides, Tensor};
pub use var::{BackwardFn, Gradients, Var};

/// Logistic function on a plain scalar, matching [`Var::sigmoid`].
pub fn sigmoid<T: Scalar>(v: T) -> T {
    ops::sigmoid_scalar(v)
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
