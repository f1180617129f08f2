//! Minimal reverse-mode differentiable array engine.
//!
//! [`RealArray`] is a dense row-major `f64` array. A [`Tape`] records
//! primitive applications in topological order; [`Tape::backward`] returns
//! one gradient per leaf. Masks are plain 0/1 arrays applied with
//! [`Primitive::Mul`].

mod array;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::RealArray;
pub use gradcheck::{coord_error, finite_diff_check, GradCheckReport, LeafReport, ABS_FALLBACK};
pub use tape::{Primitive, PrimitiveKind, Tape, Var};

#[cfg(test)]
mod tests;
