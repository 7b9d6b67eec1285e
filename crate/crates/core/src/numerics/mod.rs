//! Tensors, reverse-mode differentiation, and gradient checking.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod suite;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NormStats, ObservedStats, Var};
pub use suite::{op_cases, OpCase};
pub use tensor::Tensor;

/// Batch-norm epsilon used throughout the network.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
