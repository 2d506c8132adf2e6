//! Unified knowledge distillation.
//!
//! A teacher's and a student's intermediate stage features are fused top-down
//! with gated fusion ([`aff`]), mapped by one shared head to per-sample
//! diagonal Gaussians ([`fdp`]), and matched with a closed-form Gaussian KL
//! ([`distributions`]). Final-layer logits are matched with a temperature
//! KL ([`kd_losses`]). The [`trainer`] combines both with cross-entropy.

pub mod aff;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod fdp;
pub mod kd_losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Result, UniKdError};
pub use tensor::Tensor;
