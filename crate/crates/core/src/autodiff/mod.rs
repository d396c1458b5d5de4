//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`] then
//! walks the record once in reverse, accumulating gradients into trainable
//! leaves. [`Var::detach`] cuts the record: the detached var carries the same
//! values but no parent, so gradients stop there exactly.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{central_difference, finite_difference_check, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
