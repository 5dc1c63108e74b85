//! Dense tensors with define-by-run reverse-mode differentiation.

mod composite;
pub mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
