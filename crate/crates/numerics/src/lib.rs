//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! Everything here is sized for small convolutional/attention models on a
//! CPU: matrices are the unit of work and the heavy lifting is delegated to a
//! strided GEMM kernel.

mod error;
mod gradcheck;
mod real;
mod tape;
mod tensor;
pub mod suite;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, grad_check_coords};
pub use real::{gemm, MatView, MatViewMut, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{attention, matmul, multi_head_attention, softmax, Tensor};
