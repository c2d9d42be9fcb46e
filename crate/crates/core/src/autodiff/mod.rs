//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;


pub use params::{clip_grad_norm, sgd_step, sgd_step_where, ParameterSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{set_corrupted_backward, stable_sigmoid, OpKind, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
