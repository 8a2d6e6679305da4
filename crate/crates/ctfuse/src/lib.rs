//! Bayesian fusion of multi-pipeline cortical thickness measurements.
//!
//! K software pipelines each produce a noisy estimate of the same latent
//! quantity (entorhinal cortical thickness) at every visit. This crate models
//! the panel hierarchically: a non-elliptically-contoured t error law with
//! per-pipeline offsets, scales, degrees of freedom, and a shared correlation
//! structure; a latent per-visit thickness; and a longitudinal mixed-effects
//! regression linking the latent thickness to a clinical outcome. Inference
//! runs on a self-contained No-U-Turn sampler, and a synthetic-data generator
//! plus summary/diagnostic tooling close the loop for parameter-recovery
//! testing.

pub mod cli;
pub mod dataio;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod kv;
pub mod posterior;
pub mod sampler;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
