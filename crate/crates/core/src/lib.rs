//! Prior-aligned latent tokenizer toolkit.
//!
//! * [`backbone`]: frozen representation features (synthetic or cached).
//! * [`prior`]: bottleneck-matched semantic and structural targets.
//! * [`tokenizer`]: modulator, RMS-sphere latent, deprojector and decoder.
//! * [`losses`]: reconstruction plus the structure, continuity and
//!   semantic alignment regularizers.
//! * [`metrics`]: latent-geometry diagnostics.
//! * [`generator`]: toy flow-matching transformer and sampler.
//! * [`harness`]: configuration, persistence, FID and sweeps.

pub mod backbone;
pub mod data;
pub mod error;
pub mod generator;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod prior;
pub mod rng;
pub mod tokenizer;

pub use error::{PaeError, Result};
