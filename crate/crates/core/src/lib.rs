//! Noisy-bias activation quantization.
//!
//! A fixed, pre-sampled uniform noise vector is added to a linear layer's
//! input before activation quantization and removed afterwards through a
//! precomputed denoising bias. This crate holds the quantizers, the
//! closed-form error theory with its Monte Carlo oracle, the noisy linear
//! layer (float-simulated and integer paths), calibration, and a desk-scale
//! transformer block for end-to-end checks.

pub mod calibration;
pub mod error;
pub mod model;
pub mod noisy_linear;
pub mod numerics;
pub mod quantizers;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::Tensor2D;
