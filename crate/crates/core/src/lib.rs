//! Weakly-supervised semantic segmentation from saliency maps and image tags,
//! trained with image- and pixel-level label denoising plus simple/complex
//! distribution alignment.

pub mod align_c2s;
pub mod align_s2c;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoise_image;
pub mod denoise_pixel;
pub mod error;
pub mod fixture;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
