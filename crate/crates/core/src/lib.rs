//! Synthetic face-recognition toolkit: scene-manifest sampling, landmark
//! alignment and augmentation, additive-angular-margin training, 10-fold
//! verification, and the variance-swap and sensitivity-probe experiments.

pub mod align;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod margin;
pub mod nn;
pub mod sampler;
pub mod toy;
pub mod trainer;
pub mod verifier;
pub mod seed;

pub use error::{Error, Result};
