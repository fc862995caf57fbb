//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{BinaryOp, ConvPadding, Graph, Operand, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::{log_add, log_sum_exp};
