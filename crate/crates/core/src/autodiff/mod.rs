//! Minimal dense reverse-mode differentiation: the layers needed by the
//! encoder, the attention poolings and the classifier head.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use gradcheck::{grad_check, relative_error, GradCheck, DEFAULT_STEP};
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};

/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;
