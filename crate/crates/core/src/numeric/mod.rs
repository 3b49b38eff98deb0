//! Dense linear algebra, reverse-mode differentiation and gradient checking.

mod functions;
mod gradcheck;
mod graph;
pub mod linalg;
mod param;
mod rng;

pub use functions::{
    l2_normalize, l2_normalize_eps, sigmoid, softmax_t, softplus, softplus_scalar, DEFAULT_NORM_EPSILON,
};
pub use gradcheck::{finite_diff_check, Coordinate, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionLayout, Graph, Var};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use rng::Rng;

/// Standard deviation of the truncated-Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
