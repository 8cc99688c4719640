//! Linear warmup followed by cosine decay to zero.

use crate::error::{Error, Result};

use super::TrainConfig;

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1))
}

/// Learning rate at `step` (0-based) of `total_steps`.
///
/// Ramps linearly from 0 to `peak_lr` over the warmup steps, then follows
/// `peak_lr * (1 + cos(pi * progress)) / 2`, reaching 0 at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = warmup_steps(total_steps, cfg.warmup_fraction);
    if step < warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    let decay_len = total_steps - 1 - warmup;
    if decay_len == 0 {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / decay_len as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
