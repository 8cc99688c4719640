//! Teacher training, ensemble distillation and device-specific fine-tuning.

mod adam;
mod bundle;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DEFAULT_HEAD_INIT_SCALE;

pub use adam::{adam_step, AdamState};
pub use bundle::{DsftOutcome, ModelBundle};
pub use schedule::{lr_at, warmup_steps};
pub use train::{
    alignment_metrics, argmax, distill_student, dsft, ensemble_logits, fit, init_model, train_teacher, AlignmentMetrics,
    MetricRecord, Objective, TeacherEnsemble, TeacherMode, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Parameter("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Parameter("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Optimization settings of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Drives batch order and augmentation. Not read from config files; the
    /// experiment derives it from its own seed.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Factor on the classifier's Glorot range for freshly initialized
    /// models. Unused by fine-tuning.
    #[serde(default = "default_head_init_scale")]
    pub head_init_scale: f64,
}

fn default_head_init_scale() -> f64 {
    DEFAULT_HEAD_INIT_SCALE
}

impl Default for TrainConfig {
    /// Distillation stage settings: 500 epochs, batch 128, peak lr 5e-4.
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            peak_lr: 5e-4,
            warmup_fraction: 0.1,
            seed: 0,
            optimizer: AdamConfig::default(),
            head_init_scale: DEFAULT_HEAD_INIT_SCALE,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning settings: 100 epochs per device at lr 1e-5.
    pub fn fine_tune_default() -> Self {
        Self {
            epochs: 100,
            peak_lr: 1e-5,
            ..Self::default()
        }
    }

    /// Validates the stage settings. `epochs == 0` is allowed only where a
    /// stage may be a no-op (fine-tuning).
    pub fn validate(&self, allow_zero_epochs: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Parameter("peak lr must be finite and >= 0".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "warmup fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::Parameter("head init scale must be finite and >= 0".into()));
        }
        self.optimizer.validate()
    }
}
