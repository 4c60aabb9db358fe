//! Dense `f64` tensors with reverse-mode ([`Tape`]) and forward-mode
//! ([`Dual`]) automatic differentiation.
//!
//! The primitive set is small on purpose: it covers multilayer perceptrons,
//! radial-basis networks, gather-based convolutions and the log-determinant
//! of small symmetric matrices.

mod dual;
mod error;
pub mod linalg;
mod tape;
mod tensor;

pub use dual::{jacobian, jvp, Dual, Scalar};
pub use error::{DiffError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
