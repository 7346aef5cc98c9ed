use serde::{Deserialize, Serialize};

use crate::autonet::UNetConfig;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::masking::{make_grid, DEFAULT_MASK_RATIO};

pub const DESK_CROP: [usize; 3] = [24, 32, 32];
pub const DESK_PATCH: [usize; 3] = [6, 8, 8];
pub const DEFAULT_PROBE_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FreezeSpec {
    None,
    /// Only the 1x1x1 output projection is trained.
    AllButLastDecoderLayer,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    Mae,
    DiceCe,
}

/// How hidden voxels are filled before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Imputation {
    Zero,
    /// Trainable per-channel constant.
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub crop_shape: [usize; 3],
    pub patch_shape: [usize; 3],
    pub seed: u64,
    pub freeze_spec: FreezeSpec,
    pub objective: Objective,
    pub imputation: Imputation,
    /// Hard cap on optimizer steps; also the horizon of the cosine schedule.
    pub max_steps: Option<usize>,
    /// Write an intermediate checkpoint every this many epochs.
    pub save_every: Option<usize>,
    pub model: UNetConfig,
}

impl TrainConfig {
    /// MAE pretraining at desk scale.
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 2,
            lr0: 1e-4,
            lr_min: 0.0,
            mask_ratio: DEFAULT_MASK_RATIO,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            crop_shape: DESK_CROP,
            patch_shape: DESK_PATCH,
            seed: 0,
            freeze_spec: FreezeSpec::None,
            objective: Objective::Mae,
            imputation: Imputation::Zero,
            max_steps: None,
            save_every: None,
            model: UNetConfig::default(),
        }
    }

    /// Full-parameter segmentation fine-tuning.
    pub fn finetune() -> Self {
        TrainConfig {
            epochs: 100,
            objective: Objective::DiceCe,
            ..Self::pretrain()
        }
    }

    /// Few-shot linear probing of the output projection.
    pub fn probe() -> Self {
        TrainConfig {
            lr0: 1e-3,
            freeze_spec: FreezeSpec::AllButLastDecoderLayer,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return bad(format!("learning rates lr0 {} / lr_min {}", self.lr0, self.lr_min));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {}", self.mask_ratio));
        }
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) {
            return bad(format!("lambda {} / epsilon {}", self.lambda, self.epsilon));
        }
        if self.save_every == Some(0) {
            return bad("save_every must be positive".into());
        }
        make_grid(self.crop_shape, self.patch_shape).map_err(|e| Error::BadConfig(e.to_string()))?;
        self.model.validate()?;
        self.model
            .check_extents(self.crop_shape)
            .map_err(|e| Error::BadConfig(e.to_string()))?;
        Ok(())
    }
}
