//! Diffusion-driven, age-stratified SEEIIR transmission model fitted to
//! age-stratified death counts with the no-U-turn sampler.
//!
//! The pipeline from unconstrained parameters to the log posterior is
//! `posterior::Model`: latent weekly random walks ([`latent`]) set the
//! transmission rate matrix ([`epi`]), the daily Heun solver ([`ode`])
//! yields new infections, and [`observation`] convolves them into expected
//! deaths under a negative-binomial likelihood. Gradients are exact for the
//! discretized model via a hand-written reverse pass through the solver.

pub mod epi;
pub mod error;
pub mod exec;
pub mod latent;
pub mod observation;
pub mod ode;
pub mod outputs;
pub mod posterior;
pub mod sampler;

pub use error::{Error, Result};
