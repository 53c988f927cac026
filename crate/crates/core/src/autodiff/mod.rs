//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients for every node
//! that depends on a parameter.

mod gemm;
mod gradcheck;
mod graph;
mod resample;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, op_suite, relative_error, OpCheck};
pub use graph::{Gradients, Graph, Var};
pub use resample::{Kernel, ResamplePlan};
pub use tensor::Tensor;
