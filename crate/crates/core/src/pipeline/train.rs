use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::data::{batch_indices, stream, DatasetSplit, Samples};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, dafa_teacher_loss, dcsl, gdal, kd_loss, DafaConfig, KdConfig};
use crate::model::{enforce_budget, ComplexityBudget, Mlp, NetworkSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::{adam_step, lr_at, AdamState, DsftOutcome, ModelBundle, TrainConfig};

const INIT_STREAM: u64 = 100;
const AUGMENT_STREAM: u64 = 101;

/// One line of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    CeOnly,
    Dafa,
}

/// Frozen teachers whose logits are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    members: Vec<Mlp>,
}

impl TeacherEnsemble {
    pub fn new(members: Vec<Mlp>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Validation("teacher ensemble needs at least one member".into()))?;
        let (classes, input) = (first.spec().num_classes, first.spec().input_dim);
        if let Some(m) = members
            .iter()
            .find(|m| m.spec().num_classes != classes || m.spec().input_dim != input)
        {
            return Err(Error::Validation(format!(
                "ensemble member {:?} disagrees on classes/input ({classes}, {input})",
                m.spec()
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].spec().num_classes
    }

    pub fn checksums(&self) -> Vec<String> {
        self.members.iter().map(Mlp::checksum).collect()
    }
}

/// Arithmetic mean of the members' logits. Carries no gradient.
pub fn ensemble_logits(ensemble: &TeacherEnsemble, features: &Tensor) -> Result<Tensor> {
    let mut members = ensemble.members.iter();
    let mut sum = members.next().expect("non-empty").forward(features)?.logits;
    for m in members {
        let logits = m.forward(features)?.logits;
        if logits.shape() != sum.shape() {
            return Err(Error::Validation("ensemble members disagree on class count".into()));
        }
        sum.data_mut().iter_mut().zip(logits.data()).for_each(|(s, x)| *s += x);
    }
    let k = ensemble.members.len() as f64;
    sum.data_mut().iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

/// Loss minimized by [`fit`].
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Dafa(DafaConfig),
    Distill {
        ensemble: &'a TeacherEnsemble,
        kd: KdConfig,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub history: Vec<MetricRecord>,
}

/// Trains `model` in place for `cfg.epochs` epochs of device-stratified
/// batches. The model is initialized elsewhere; batching and augmentation are
/// driven by `cfg.seed`. When `monitor` is given its loss and accuracy are
/// logged after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    stage: &str,
    model: &mut Mlp,
    data: &DatasetSplit,
    train: &Samples,
    cfg: &TrainConfig,
    augmentation: &Augmentation,
    objective: Objective<'_>,
    monitor: Option<&Samples>,
) -> Result<Vec<MetricRecord>> {
    let monitor = monitor.filter(|v| !v.is_empty());
    train_loop(stage, model, data, train, cfg, augmentation, objective, |epoch, m, log| {
        if let Some(val) = monitor {
            let (loss, accuracy) = ce_and_accuracy(m, val, data.num_classes)?;
            log.push(MetricRecord {
                stage: stage.to_string(),
                epoch,
                split: "validation".into(),
                loss,
                accuracy,
            });
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    stage: &str,
    model: &mut Mlp,
    data: &DatasetSplit,
    train: &Samples,
    cfg: &TrainConfig,
    augmentation: &Augmentation,
    objective: Objective<'_>,
    mut after_epoch: impl FnMut(usize, &Mlp, &mut Vec<MetricRecord>) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    if train.is_empty() {
        return Err(Error::Validation(format!("{stage}: no training samples")));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut aug_rng = stream(cfg.seed, AUGMENT_STREAM);
    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in batch_indices(train, cfg.batch_size, cfg.seed, epoch as u64, true) {
            let batch = train.batch(&idx, data.num_classes, data.freq_bins)?;
            let batch = augmentation.apply(batch, &mut aug_rng)?;
            let tape = Tape::new();
            let fwd = model.forward_tape(&tape, &batch.features)?;
            let loss = match objective {
                Objective::CrossEntropy => cross_entropy(fwd.logits, &batch.targets)?,
                Objective::Dafa(dafa) => dafa_teacher_loss(
                    fwd.logits,
                    fwd.embedding,
                    &batch.targets,
                    &batch.device_ids,
                    &dafa,
                )?,
                Objective::Distill { ensemble, kd } => {
                    // teachers see exactly the augmented batch the student sees
                    let teacher = ensemble_logits(ensemble, &batch.features)?;
                    kd_loss(fwd.logits, &teacher, &batch.targets, &kd)?
                }
            };
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &fwd)?;
            let lr = lr_at(step, total_steps, cfg)?;
            adam_step(model.params_mut(), &mut adam, lr, &cfg.optimizer)?;
            model.zero_grad();
            step += 1;

            loss_sum += loss.item() * batch.len() as f64;
            let logits = fwd.logits.to_tensor();
            correct += (0..batch.len())
                .filter(|&i| argmax(logits.row(i)) == argmax(batch.targets.row(i)))
                .count();
            seen += batch.len();
        }
        history.push(MetricRecord {
            stage: stage.to_string(),
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            accuracy: 100.0 * correct as f64 / seen as f64,
        });
        after_epoch(epoch, model, &mut history)?;
    }
    Ok(history)
}

/// The fresh model a stage with settings `cfg` starts from.
pub fn init_model(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Mlp> {
    Mlp::init_scaled(spec, cfg.head_init_scale, &mut stream(cfg.seed, INIT_STREAM))
}

/// Trains a teacher from a fresh initialization.
///
/// `CeOnly` minimizes cross-entropy; `Dafa` adds the device alignment terms
/// on the embedding and needs at least two training devices.
pub fn train_teacher(
    data: &DatasetSplit,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mode: TeacherMode,
    dafa: &DafaConfig,
    augmentation: &Augmentation,
) -> Result<TrainOutcome> {
    cfg.validate(false)?;
    let objective = match mode {
        TeacherMode::CeOnly => Objective::CrossEntropy,
        TeacherMode::Dafa => {
            dafa.validate()?;
            let devices: std::collections::BTreeSet<_> = data.train.devices.iter().collect();
            if devices.len() < 2 {
                return Err(Error::Validation(format!(
                    "alignment training needs >= 2 training devices, found {}",
                    devices.len()
                )));
            }
            Objective::Dafa(*dafa)
        }
    };
    let stage = match mode {
        TeacherMode::CeOnly => "teacher_ce",
        TeacherMode::Dafa => "teacher_dafa",
    };
    let mut model = init_model(spec, cfg)?;
    let history = fit(stage, &mut model, data, &data.train, cfg, augmentation, objective, Some(&data.validation))?;
    Ok(TrainOutcome { model, history })
}

/// Distills `ensemble` into a fresh student. Refuses students over budget.
pub fn distill_student(
    data: &DatasetSplit,
    student_spec: &NetworkSpec,
    ensemble: &TeacherEnsemble,
    kd: &KdConfig,
    cfg: &TrainConfig,
    augmentation: &Augmentation,
    budget: &ComplexityBudget,
) -> Result<TrainOutcome> {
    let report = enforce_budget(student_spec, budget);
    if !report.passed {
        return Err(Error::Budget(report.violations().join("; ")));
    }
    kd.validate()?;
    cfg.validate(false)?;
    if ensemble.num_classes() != student_spec.num_classes {
        return Err(Error::Validation("student and teachers disagree on class count".into()));
    }
    let mut model = init_model(student_spec, cfg)?;
    let objective = Objective::Distill { ensemble, kd: *kd };
    let history = fit("distill", &mut model, data, &data.train, cfg, augmentation, objective, Some(&data.validation))?;
    Ok(TrainOutcome { model, history })
}

/// Fine-tunes one copy of `base` per seen device on that device's training
/// samples with plain cross-entropy, keeping the epoch (the untouched base
/// counts as epoch 0) with the best accuracy on the device's validation
/// samples.
pub fn dsft(
    base: &Mlp,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    augmentation: &Augmentation,
    budget: &ComplexityBudget,
) -> Result<DsftOutcome> {
    cfg.validate(true)?;
    let seen = data.seen_devices();
    if seen.is_empty() {
        return Err(Error::Validation("fine-tuning needs at least one known device".into()));
    }
    let mut specialists = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut history = Vec::new();
    for d in seen {
        let id = &data.roster[d].id;
        let train = data.train.filter_device(d);
        if train.is_empty() {
            let msg = format!("device {id}: no training samples, specialist skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let val = data.validation.filter_device(d);
        let specialist = if cfg.epochs == 0 {
            base.clone()
        } else {
            fine_tune_one(base, data, &train, &val, cfg, augmentation, id, &mut history)?
        };
        specialists.insert(id.clone(), specialist);
    }
    Ok(DsftOutcome {
        bundle: ModelBundle::new(base.clone(), specialists, budget)?,
        warnings,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn fine_tune_one(
    base: &Mlp,
    data: &DatasetSplit,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    augmentation: &Augmentation,
    device: &str,
    history: &mut Vec<MetricRecord>,
) -> Result<Mlp> {
    let stage = format!("dsft_{device}");
    let mut model = base.clone();
    let mut best = model.clone();
    let mut best_acc = if val.is_empty() {
        f64::NEG_INFINITY
    } else {
        ce_and_accuracy(&model, val, data.num_classes)?.1
    };
    let log = train_loop(&stage, &mut model, data, train, cfg, augmentation, Objective::CrossEntropy, |epoch, m, log| {
        if val.is_empty() {
            best = m.clone();
            return Ok(());
        }
        let (loss, accuracy) = ce_and_accuracy(m, val, data.num_classes)?;
        log.push(MetricRecord {
            stage: stage.clone(),
            epoch,
            split: "validation".into(),
            loss,
            accuracy,
        });
        if accuracy > best_acc {
            best_acc = accuracy;
            best = m.clone();
        }
        Ok(())
    })?;
    history.extend(log);
    Ok(best)
}

/// Mean cross-entropy and accuracy (percent) of `model` on `samples`.
pub(crate) fn ce_and_accuracy(model: &Mlp, samples: &Samples, num_classes: usize) -> Result<(f64, f64)> {
    let logits = model.forward(&samples.features_tensor()?)?.logits;
    let log_probs = crate::tensor::log_softmax_rows(logits.data(), num_classes, 1.0);
    let n = samples.len();
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..n {
        let row = &log_probs[i * num_classes..(i + 1) * num_classes];
        loss -= row[samples.labels[i]];
        if argmax(row) == samples.labels[i] {
            correct += 1;
        }
    }
    Ok((loss / n as f64, 100.0 * correct as f64 / n as f64))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Scatter ratio and centroid spread of a model's embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    /// `S_W / (S_B + eps)` over all of `samples`.
    pub scatter_ratio: f64,
    pub centroid_spread: f64,
}

pub fn alignment_metrics(model: &Mlp, samples: &Samples, epsilon: f64) -> Result<AlignmentMetrics> {
    let emb = model.forward(&samples.features_tensor()?)?.embedding;
    let tape = Tape::new();
    let x = tape.constant(emb);
    Ok(AlignmentMetrics {
        scatter_ratio: dcsl(x, &samples.devices, epsilon)?.item(),
        centroid_spread: gdal(x, &samples.devices)?.item(),
    })
}
