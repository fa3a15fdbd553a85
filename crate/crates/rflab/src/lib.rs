//! Numerical laboratory for Perelman's almost Ricci-flat manifolds.
//!
//! Brownian motion on M × S^N × I, projected to (x, τ), converges as N → ∞ to
//! parabolic Brownian motion on the Ricci-flow space-time; its frame
//! diffusion converges to stochastic parallel transport. This crate builds
//! the geometry for two closed-form flows, simulates the projected processes
//! for finite N and the limit objects directly, and measures the gap.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::len_without_is_empty)]

pub mod backgrounds;
pub mod config;
pub mod error;
pub mod generators;
pub mod lab;
pub mod output;
pub mod perelman;
pub mod reference;
pub mod rng;
pub mod scenario;
pub mod sde;

pub use error::{LabError, Result};
