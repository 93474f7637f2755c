//! Dense tensors, a reverse-mode computation record, and finite-difference
//! verification.

mod gradcheck;
mod real;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use real::{Precision, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("configuration error: {0}")]
    Config(String),
}

#[cfg(test)]
mod tape_tests;
