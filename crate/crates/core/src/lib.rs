//! Randomly weighted ReLU echo state networks with a block-shift reservoir.
//!
//! The reservoir update is
//!
//! ```text
//! s_t = relu(W ((2 / (n M2)) P W^T s_{t-1} + Q u_t) + b),   y_t = a . s_t
//! ```
//!
//! where the rows of `(W, b)` are i.i.d. draws from a symmetric bounded
//! distribution with second moment `M2`, `P` is the nilpotent block shift and
//! `Q` embeds the current input into the last block. Because
//! `E[(2 / M2) w relu(w . x + b)] = x`, the pre-activation vector carries a
//! sliding window of (approximately) reconstructed inputs.
//!
//! Modules:
//! - [`ensemble`]: weight sampling and serialization
//! - [`reservoir`]: state update, trajectories, dual-trajectory gaps
//! - [`operators`]: target causal operators with analytic memory tails
//! - [`solver`]: fixed-point construction of the internal window trajectory
//! - [`readout`]: ridge readouts and sup-norm operator error
//! - [`bounds`]: closed-form approximation bounds and their empirical checks
//! - [`fourier`]: ReLU integral representations built from Fourier transforms

// Parameter checks use `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
mod descriptor;
pub mod ensemble;
mod error;
pub mod fourier;
pub mod operators;
pub mod quadrature;
pub mod readout;
pub mod reservoir;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};

/// Rectified linear unit.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}
