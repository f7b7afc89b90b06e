//! Adams-Bashforth output caching for diffusion and flow-matching samplers.
//!
//! Instead of reusing a cached network output unchanged on skipped steps,
//! the sampler combines the last `k` real outputs with binomial weights
//! (times `exp(i h)` in the half-logSNR coordinate), giving an `O(h^k)`
//! reconstruction error.
//!
//! - [`schedule`]: noise schedules, half-logSNR and step grids.
//! - [`model`]: the predictor abstraction and analytic oracles.
//! - [`integrator`]: exact Adams-Bashforth weights and extrapolation rules.
//! - [`sampler`]: the baseline and cached denoising loops.
//! - [`analysis`]: similarity and scale-factor curves, order estimates, speedup.

pub mod analysis;
pub mod error;
pub mod integrator;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod vecops;

pub use error::{Error, Result};
