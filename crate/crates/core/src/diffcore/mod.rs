//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! replays it in reverse. Subgradient conventions: `relu'(0) = 0`,
//! `sqrt'(0) = 0`, and ties in max reductions route the whole gradient to the
//! lowest index.

mod array;
mod gradcheck;
mod primitive;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use primitive::{forward_primitive, Primitive, PrimitiveOutput};
pub use tape::{logistic, softplus, softplus_inverse, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

#[cfg(test)]
mod tests;
