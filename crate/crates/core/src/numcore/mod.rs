//! Dense `f64` tensors and reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod mask;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, ParamCheck};
pub use mask::AttentionMask;
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Fault, Gradients, Tape, Var};
pub use tensor::Tensor;
