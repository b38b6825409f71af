//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod value;

pub use gradcheck::{grad_check, relative_error, GradReport, ParamCheck, FD_STEP, REL_ERROR_FLOOR};
pub use graph::{sigmoid, softmax_rows_value, BackwardFn, Elementwise, Gradients, Graph, Var};
pub use value::Tensor;
