//! Dense tensors, differentiable operations and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod param;
pub mod sten;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use param::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};
