//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{log_sum_exp, matmul_raw, softmax_in_place, Graph, Var, DEFAULT_LN_EPS};
pub use tensor::Tensor;
