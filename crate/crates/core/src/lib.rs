//! Perceptual image codec with a diffusion decoder.
//!
//! An image is summarized by a coarse grid of vector-quantized hyper-latent
//! indices and an optional global token. The decoder is a small conditional
//! diffusion model that samples a reconstruction from that side information.

pub mod arith;
pub mod bitstream;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod quantization;
pub mod rate;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
