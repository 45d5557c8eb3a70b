//! Spectrally decoupled flow-matching policy.
//!
//! The network's terminal layer splits a latent action trajectory by
//! cumulative spectral energy into a slow branch, advanced by a learned
//! global Koopman matrix, and a transient branch, advanced by a
//! Tikhonov-regularized DMD operator fitted per window. Training fuses
//! optimal-transport flow matching with EMA-teacher consistency
//! distillation, so one Euler step is enough at deployment.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod config;
mod error;
pub mod gradcore;
pub mod inference;
pub mod koopman;
pub mod spectral;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
pub use gradcore::{Tape, Tensor, Var};
