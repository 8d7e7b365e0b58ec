//! Diffusion-based optical image translation with color
//! standardization, PSNR-voted DDIM inference, and targetless change
//! detection, plus a procedural generator of paired imagery for
//! desk-scale experiments.

pub mod changedet;
pub mod color;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
