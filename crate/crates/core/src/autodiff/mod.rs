//! Tape-based reverse-mode differentiation.
//!
//! Ops append nodes to a [`Tape`] in execution order; [`Tape::backward`]
//! walks them in reverse, so insertion order is the topological order.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, rel_err, GradCheckConfig, GradCheckReport};
pub use tape::{BackwardFn, Gradients, Tape, Var};
