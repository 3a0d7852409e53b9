//! A small reverse-mode automatic differentiation engine over dense `f64`
//! arrays, with exactly the operators needed by 3D encoder-decoder networks
//! and vector quantizers.
//!
//! Values live on a [`Graph`] tape. Parameters are kept outside the tape in a
//! [`ParamSet`], bound as leaves for each forward pass, and updated by
//! [`Adam`] from the collected gradients.

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::squared_distance;
pub use optim::{Adam, AdamConfig, Moments};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    ops::conv_out_extent(input, kernel, stride, padding)
}
