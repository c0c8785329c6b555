//! Encoder-decoder image steganography with channel and spatial attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, the differentiable operations and their gradient checks
//! - [`attention`]: channel/spatial attention maps and the six wirings
//! - [`model`]: prep, hiding and reveal networks plus the training loss
//! - [`metrics`]: MSE, PSNR and SSIM, and the per-configuration report
//! - [`pipeline`]: datasets, training, checkpoints and the six-way comparison
//! - [`verify`]: the gradient-check suite behind `stegattn gradcheck`

pub mod attention;
pub mod error;
mod init;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod verify;

pub use attention::AttentionMode;
pub use error::{CheckpointError, Error, Result};
pub use model::{ModelConfig, StegoModelParams};
pub use numerics::{Shape, Tensor};
