//! Masked-autoencoder pretraining for paired PET/CT volumes.

pub mod error;
pub mod autonet;
pub mod cli;
pub mod fsutil;
pub mod harmonize;
pub mod infer;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod reduce;
pub mod register;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
