//! Differentiable tensor core: dense tensors, a reverse-mode tape, a named
//! parameter store and finite-difference gradient checks.

mod graph;
pub mod gradcheck;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use graph::{bce_logit, Conv2dSpec, Grads, Graph, Var, LAYER_NORM_EPS, NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
