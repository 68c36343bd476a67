//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Primitives append nodes,
//! [`Tape::backward`] replays them in reverse and leaves that require grad
//! accumulate their gradients. [`gradcheck`] compares tape gradients with
//! central finite differences.

mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{fd_check, fd_check_with, FdOptions, FdReport, Stencil};
pub use ops::elementwise::{BinaryOp, Elementwise, UnaryOp};
pub use scalar::Scalar;
pub use tape::{Backward, Tape, Var};
pub use tensor::DTensor;
