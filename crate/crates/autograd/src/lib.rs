//! Reverse-mode automatic differentiation for small transformer models on CPU.
//!
//! The tape ([`Graph`]) supports exactly the ops a set-prediction detector
//! needs: dense and batched matmul, broadcast add, ReLU/sigmoid, layer norm,
//! strided 2-d convolution and multi-head attention split into a weights op
//! and an apply op (so attention maps can be supervised directly). Losses
//! computed outside the tape enter through [`Graph::custom_scalar`].
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Execution is single-threaded and bitwise deterministic.

mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, ParamGrads, ValueRef, Var};
pub use optim::AdamW;
pub use params::{init, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
