//! Dense tensors, reverse-mode differentiation and the finite-difference
//! gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, grad_error, grads_close, GradError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{causal_mask, gather_rows, label_smoothed_ce, layer_norm, softmax_rows, LAYER_NORM_EPS};
pub use tensor::{Indices, Tensor};
