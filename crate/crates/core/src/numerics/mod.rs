//! Dense `f64` tensors, tape-based reverse-mode differentiation and the
//! Adam optimizer.

mod adam;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use ops::{label_smoothed_ce, layer_norm, log_softmax, masked_softmax, softmax};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
