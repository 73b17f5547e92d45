pub mod autograd;
pub mod diagnostics;
pub mod error;
pub mod fsio;
pub mod metrics;
pub mod mix;
pub mod model;
pub mod peft;
pub mod scanner;
pub mod train;

pub use autograd::{Grads, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{build_model, ArchConfig, Model, Variant};
