//! Dense row-major tensors with a reverse-mode tape.
//!
//! Enough machinery to train and evaluate a small transformer on a CPU:
//! matrix products, layer norm, GELU, softmax variants, embedding lookups,
//! masked cross entropy and a fused rotary attention kernel, plus a
//! central-difference gradient checker and a simple checkpoint format.

mod attention;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use attention::AttnLayout;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
