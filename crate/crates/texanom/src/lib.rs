//! Texture anomaly detection with a CW-SSIM-trained convolutional
//! autoencoder: complex subband decomposition, CW-SSIM / SSIM / MSE losses
//! with exact gradients, patch-based training, full-image anomaly maps,
//! threshold calibration, and pixelwise ROC evaluation.

pub mod autoencoder;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pyramid;
pub mod similarity;

pub use error::{Result, TexanomError};
