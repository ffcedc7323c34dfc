//! Dense tensors, a reverse-mode differentiation graph, and the neural
//! primitives (matmul, softmax, layer norm, GELU, cosine similarity,
//! multi-head attention) every other module builds on. All arithmetic is
//! 64-bit; desk scale makes that free and keeps test tolerances tight.

mod attention;
mod check;
mod graph;
mod tensor;

pub use attention::{linear, multi_head_attention, AttentionProj};
pub use check::{
    analytic_gradients, fd_gradients, grad_check, grad_check_sampled, max_relative_error,
    DEFAULT_EPS,
};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

/// Layer-normalization epsilon used everywhere a norm appears.
pub const LN_EPS: f64 = 1e-5;

pub(crate) use graph::norm;
