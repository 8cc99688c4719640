//! Batch-level Mixup and Freq-MixStyle.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to per-bin standard deviations before normalizing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
    pub apply_probability: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            apply_probability: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqMixStyleConfig {
    pub alpha: f64,
    pub apply_probability: f64,
}

impl Default for FreqMixStyleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            apply_probability: 0.4,
        }
    }
}

fn check(alpha: f64, p: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("beta alpha must be > 0, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("apply probability must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.alpha, self.apply_probability)
    }
}

impl FreqMixStyleConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.alpha, self.apply_probability)
    }
}

/// Both augmentations; a `None` entry disables that augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub mixup: Option<MixupConfig>,
    pub freq_mixstyle: Option<FreqMixStyleConfig>,
}

impl Augmentation {
    pub fn none() -> Self {
        Self::default()
    }

    /// Freq-MixStyle first (on raw features), then Mixup.
    pub fn apply<R: Rng>(&self, batch: LabeledBatch, rng: &mut R) -> Result<LabeledBatch> {
        let batch = match &self.freq_mixstyle {
            Some(cfg) => freq_mixstyle(batch, cfg, rng)?,
            None => batch,
        };
        match &self.mixup {
            Some(cfg) => mixup(batch, cfg, rng),
            None => Ok(batch),
        }
    }
}

/// Random coefficient and partner permutation for one application.
fn draw<R: Rng>(n: usize, alpha: f64, p: f64, rng: &mut R) -> Result<Option<(f64, Vec<usize>)>> {
    check(alpha, p)?;
    // the gate is drawn even when p is 0 or 1 so rng consumption is fixed
    let gate: f64 = rng.random();
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(e.to_string()))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok((gate < p).then_some((lambda, perm)))
}

pub fn mixup<R: Rng>(batch: LabeledBatch, cfg: &MixupConfig, rng: &mut R) -> Result<LabeledBatch> {
    match draw(batch.len(), cfg.alpha, cfg.apply_probability, rng)? {
        Some((lambda, perm)) => mixup_with(&batch, lambda, &perm),
        None => Ok(batch),
    }
}

/// `lambda * x + (1 - lambda) * x[perm]`, targets mixed the same way; device
/// ids stay with the first operand.
pub fn mixup_with(batch: &LabeledBatch, lambda: f64, perm: &[usize]) -> Result<LabeledBatch> {
    check_perm(batch.len(), perm)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("mix coefficient must lie in [0, 1], got {lambda}")));
    }
    let mix = |t: &Tensor| {
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in perm.iter().enumerate() {
            out.extend(
                t.row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(a, b)| lambda * a + (1.0 - lambda) * b),
            );
        }
        Tensor::matrix(t.rows(), c, out)
    };
    LabeledBatch::new(
        mix(&batch.features),
        mix(&batch.targets),
        batch.device_ids.clone(),
        batch.freq_bins,
    )
}

pub fn freq_mixstyle<R: Rng>(batch: LabeledBatch, cfg: &FreqMixStyleConfig, rng: &mut R) -> Result<LabeledBatch> {
    match draw(batch.len(), cfg.alpha, cfg.apply_probability, rng)? {
        Some((lambda, perm)) => freq_mixstyle_with(&batch, lambda, &perm),
        None => Ok(batch),
    }
}

/// Per-sample, per-frequency-bin mean and (floored) standard deviation over
/// the time axis, each `n x F`.
pub fn bin_statistics(batch: &LabeledBatch) -> (Vec<f64>, Vec<f64>) {
    let (f_bins, t_frames) = (batch.freq_bins, batch.time_frames());
    let n = batch.len();
    let mut mean = vec![0.0; n * f_bins];
    let mut std = vec![0.0; n * f_bins];
    for i in 0..n {
        let row = batch.features.row(i);
        for f in 0..f_bins {
            let cells = &row[f * t_frames..(f + 1) * t_frames];
            let m = cells.iter().sum::<f64>() / t_frames as f64;
            let var = cells.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t_frames as f64;
            mean[i * f_bins + f] = m;
            std[i * f_bins + f] = var.sqrt();
        }
    }
    (mean, std)
}

/// Re-styles every sample with bin statistics mixed from its partner:
/// normalize with its own mean/std, then rescale with
/// `lambda * own + (1 - lambda) * partner`. Labels pass through.
pub fn freq_mixstyle_with(batch: &LabeledBatch, lambda: f64, perm: &[usize]) -> Result<LabeledBatch> {
    check_perm(batch.len(), perm)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("mix coefficient must lie in [0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(batch.clone());
    }
    let (f_bins, t_frames) = (batch.freq_bins, batch.time_frames());
    let (mean, std) = bin_statistics(batch);
    let mut out = Vec::with_capacity(batch.features.len());
    for (i, &j) in perm.iter().enumerate() {
        let row = batch.features.row(i);
        for f in 0..f_bins {
            let (mi, si) = (mean[i * f_bins + f], std[i * f_bins + f].max(STD_FLOOR));
            let (mj, sj) = (mean[j * f_bins + f], std[j * f_bins + f].max(STD_FLOOR));
            let m_mix = lambda * mi + (1.0 - lambda) * mj;
            let s_mix = lambda * si + (1.0 - lambda) * sj;
            out.extend(
                row[f * t_frames..(f + 1) * t_frames]
                    .iter()
                    .map(|x| (x - mi) / si * s_mix + m_mix),
            );
        }
    }
    LabeledBatch::new(
        Tensor::new(batch.features.shape().to_vec(), out)?,
        batch.targets.clone(),
        batch.device_ids.clone(),
        batch.freq_bins,
    )
}

fn check_perm(n: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
        return Err(Error::Validation("partner list is not a permutation of the batch".into()));
    }
    Ok(())
}
