//! Reverse-mode autodiff, layer primitives, and the Adam optimiser.

mod adam;
mod gemm;
mod gradcheck;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_all_primitives, gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{logit, sigmoid, BatchNormMode, Graph, OpKind, RunningStats, Var, NORM_EPS};

#[cfg(test)]
mod tests;
