//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Model parameters live in
//! a [`Params`] store and enter a graph through a [`Bound`] view, which
//! records each parameter once so that gradients from every use accumulate
//! on a single leaf.

mod graph;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{softmax_values, Graph, Var, LOG_FLOOR};
pub use params::{Bound, NamedTensor, ParamId, Params};
pub use tensor::Tensor;
