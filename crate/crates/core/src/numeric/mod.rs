//! Dense `f64` tensors with reverse-mode differentiation.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::AttentionPattern;
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckReport, Stencil, Objective, TensorCheck};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
