//! Desk-scale laboratory for reward fine-tuning of diffusion models.

pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod rewards;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod trainers;

pub use error::{Error, Result};
