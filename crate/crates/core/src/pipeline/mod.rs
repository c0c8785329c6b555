//! Datasets, training, checkpoints and the six-way comparison.

mod checkpoint;
mod compare;
mod dataset;
mod synth;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::metrics::SSIM_WINDOW;
use crate::model::{ModelConfig, MIN_IMAGE_SIZE};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use compare::{compare, compare_on, render_csv, ModeResult};
pub use dataset::{image_to_tensor, load_dataset, load_image, save_png, tensor_to_image, Dataset};
pub use synth::{synth_dataset, synth_image};
pub use train::{train, train_on, TrainOutcome, Trainer};

/// Fraction of pairs held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f32,
    pub beta: f32,
    pub mode: AttentionMode,
    pub data_dir: PathBuf,
    pub reduction_ratio: usize,
    pub decoder_attention: bool,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, mode: AttentionMode) -> Self {
        TrainConfig {
            seed: 0,
            image_size: 64,
            batch_size: 8,
            steps: 300,
            learning_rate: 1e-3,
            beta: 1.0,
            mode,
            data_dir: data_dir.into(),
            reduction_ratio: 8,
            decoder_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min = SSIM_WINDOW.max(MIN_IMAGE_SIZE);
        if self.image_size < min {
            return Err(Error::Usage(format!("image size must be at least {min}, got {}", self.image_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Usage("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Usage(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Usage("reduction ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            beta: self.beta,
            reduction_ratio: self.reduction_ratio,
            decoder_attention: self.decoder_attention,
        }
    }
}
