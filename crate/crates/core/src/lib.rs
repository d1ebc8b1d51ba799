//! Diffusion-model traffic-matrix analysis.
//!
//! An unconditional denoising diffusion model is trained on partially observed
//! origin–destination traffic and then sampled under measurement guidance to
//! solve network tomography (link loads → flows), traffic-matrix completion
//! (partial flows → full flows), and synthetic traffic generation.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sampling;

pub use error::{Error, Result};
