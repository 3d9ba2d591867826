//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward op appends a node to a [`Tape`]; nodes only reference
//! earlier nodes, so the tape is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

mod conv;
mod gradcheck;
mod kernels;
mod linalg;
mod nn;
mod shape;
mod spectral;
mod tape;

pub use gradcheck::{grad_check, grad_check_coords, sample_coords, GradCheckReport};
pub use tape::{Tape, Var};
