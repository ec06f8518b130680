//! Dense `f64` tensors and reverse-mode differentiation for the encoder.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{GradMap, Gradients, Graph, Var};
pub use params::{Bindings, Parameter, ParameterSet};
pub use tensor::Tensor;
