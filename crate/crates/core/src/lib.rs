//! Frequency preference control for convolutional feature maps.
//!
//! The crate splits intermediate feature maps into low- and high-frequency
//! bands with a Gaussian low-pass mask and recombines them with per-channel
//! weights. Around that layer it provides a small differentiable tensor
//! engine, a residual CNN, adversarial training and attack routines, and
//! frequency-analysis instruments.

pub mod advtrain;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fpcm;
pub mod kernels;
pub mod model;
pub mod persist;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
