//! Dense `f64` arrays, tape-based reverse-mode gradients and the Adam update.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{sigmoid, weighted_bce_value, GradTape, Gradients, OpKind, Var, BCE_EPS};
pub use tensor::Tensor;
