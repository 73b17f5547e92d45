//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod conv;
pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
