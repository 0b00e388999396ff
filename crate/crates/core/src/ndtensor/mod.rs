//! Dense `f32`/`f64` tensors, reverse-mode differentiation, and a
//! finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheck, DEFAULT_STEP};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{
    broadcast_along, concat, conv2d, conv2d_backward, gather_rows, global_avg_pool, log_sum_exp, matmul,
    nearest_source, pairwise_sq_dist, reduce, residual_aggregate, resize_nearest, sigmoid, softmax, softmax_backward,
    transpose, ConvSpec, PadMode, ReduceKind, Tensor,
};
