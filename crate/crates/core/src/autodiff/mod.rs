//! Reverse-mode differentiation over small dense tensors.
//!
//! [`Graph`] records eagerly evaluated operations; [`Graph::grad`] runs the
//! backward pass by emitting further graph operations, which is what makes
//! second-order quantities (gradients of gradient steps) available.

pub mod check;
mod graph;
mod tensor;

pub use check::{central_differences, check_graph_fn, finite_difference_check, max_relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
