//! Forward inference for the DehazeFormer dehazing network, a physics-based
//! haze synthesizer for multispectral imagery, and image quality metrics.

pub mod activations;
pub mod attention;
pub mod checks;
pub mod error;
pub mod hazegen;
pub mod image;
pub mod metrics;
pub mod network;
pub mod normalization;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
