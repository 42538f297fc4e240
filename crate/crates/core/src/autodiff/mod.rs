//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Gradients can be taken with respect to any leaf, including model inputs,
//! which is what the Fisher computations need (`∇_z log q(y|z)`).

mod graph;
mod params;
mod tensor;

pub use graph::{Activation, Graph, Var};
pub use params::{NamedTensor, ParamSet};
pub use tensor::{argmax, log_softmax_rows, Tensor};
