//! Per-device evaluation reports and before/after deltas.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSplit, Samples};
use crate::error::{Error, Result};
use crate::pipeline::ModelBundle;

/// Probabilities are clipped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub accuracy: f64,
    pub log_loss: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRow {
    pub device: String,
    pub seen: bool,
    pub real: bool,
    /// Whether a specialist produced this row.
    pub specialist: bool,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: Metrics,
    pub seen: Option<Metrics>,
    pub unseen: Option<Metrics>,
    pub real: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub model_id: String,
    pub dataset_hash: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    /// Roster order.
    pub per_device: Vec<DeviceRow>,
    pub aggregates: Aggregates,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn device(&self, id: &str) -> Option<&DeviceRow> {
        self.per_device.iter().find(|r| r.device == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Recomputes the aggregates from the device rows.
    pub fn recompute_aggregates(&self) -> Option<Aggregates> {
        aggregate(&self.per_device)
    }
}

fn pool<'a>(rows: impl Iterator<Item = &'a DeviceRow>) -> Option<Metrics> {
    let (mut acc, mut ll, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        acc += r.metrics.accuracy * r.metrics.count as f64;
        ll += r.metrics.log_loss * r.metrics.count as f64;
        n += r.metrics.count;
    }
    (n > 0).then(|| Metrics {
        accuracy: acc / n as f64,
        log_loss: ll / n as f64,
        count: n,
    })
}

fn aggregate(rows: &[DeviceRow]) -> Option<Aggregates> {
    Some(Aggregates {
        overall: pool(rows.iter())?,
        seen: pool(rows.iter().filter(|r| r.seen)),
        unseen: pool(rows.iter().filter(|r| !r.seen)),
        real: pool(rows.iter().filter(|r| r.real)),
    })
}

fn cell_metrics(bundle: &ModelBundle, cell: &Samples, device: Option<&str>, num_classes: usize) -> Result<Metrics> {
    let probs = bundle.predict(&cell.features_tensor()?, device)?;
    let (mut ll, mut correct) = (0.0, 0usize);
    for (i, &y) in cell.labels.iter().enumerate() {
        let row = probs.row(i);
        if y >= num_classes {
            return Err(Error::Validation(format!("label {y} outside {num_classes} classes")));
        }
        ll -= row[y].max(PROB_FLOOR).ln();
        if crate::pipeline::argmax(row) == y {
            correct += 1;
        }
    }
    let n = cell.len();
    Ok(Metrics {
        accuracy: 100.0 * correct as f64 / n as f64,
        log_loss: ll / n as f64,
        count: n,
    })
}

/// Identity of the models `evaluate` routes to.
fn routed_model_id(bundle: &ModelBundle, use_device_labels: bool) -> String {
    if !use_device_labels || bundle.specialists().is_empty() {
        return bundle.base().checksum();
    }
    let mut h = Sha256::new();
    h.update(bundle.base().checksum());
    for (id, m) in bundle.specialists() {
        h.update(id.as_bytes());
        h.update(m.checksum());
    }
    hex::encode(h.finalize())
}

/// Evaluates `bundle` on the validation part of `split`, device by device.
///
/// With `use_device_labels == false` every sample goes to the base model.
/// Devices without validation samples are left out with a warning.
pub fn evaluate(bundle: &ModelBundle, split: &DatasetSplit, use_device_labels: bool) -> Result<EvalReport> {
    if split.validation.is_empty() {
        return Err(Error::Validation("validation part is empty".into()));
    }
    if bundle.base().spec().input_dim != split.feature_dim() || bundle.base().spec().num_classes != split.num_classes
    {
        return Err(Error::Validation("model and dataset disagree on input size or classes".into()));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (d, info) in split.roster.iter().enumerate() {
        let cell = split.validation.filter_device(d);
        if cell.is_empty() {
            let msg = format!("device {}: no validation samples", info.id);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let route = use_device_labels.then_some(info.id.as_str());
        rows.push(DeviceRow {
            device: info.id.clone(),
            seen: info.seen,
            real: info.real,
            specialist: route.is_some_and(|id| bundle.has_specialist(id)),
            metrics: cell_metrics(bundle, &cell, route, split.num_classes)?,
        });
    }
    let aggregates = aggregate(&rows).expect("validation part is non-empty");
    Ok(EvalReport {
        stage: String::new(),
        model_id: routed_model_id(bundle, use_device_labels),
        dataset_hash: split.validation_hash(),
        config_hash: None,
        seed: None,
        per_device: rows,
        aggregates,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub accuracy: f64,
    pub log_loss: f64,
}

impl MetricDelta {
    fn between(before: &Metrics, after: &Metrics) -> Self {
        Self {
            accuracy: after.accuracy - before.accuracy,
            log_loss: after.log_loss - before.log_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub device: String,
    pub seen: bool,
    pub specialist: bool,
    pub count: usize,
    pub before: Metrics,
    pub after: Metrics,
    pub delta: MetricDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub before_stage: String,
    pub after_stage: String,
    pub dataset_hash: String,
    pub per_device: Vec<DeltaRow>,
    pub overall: MetricDelta,
}

impl DeltaReport {
    pub fn device(&self, id: &str) -> Option<&DeltaRow> {
        self.per_device.iter().find(|r| r.device == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("delta serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `after - before`, per device present in both reports and overall.
pub fn delta(before: &EvalReport, after: &EvalReport) -> Result<DeltaReport> {
    if before.dataset_hash != after.dataset_hash {
        return Err(Error::Validation(format!(
            "reports were computed on different validation data ({} vs {})",
            short(&before.dataset_hash),
            short(&after.dataset_hash)
        )));
    }
    let per_device = before
        .per_device
        .iter()
        .filter_map(|b| {
            let a = after.device(&b.device)?;
            Some(DeltaRow {
                device: b.device.clone(),
                seen: b.seen,
                specialist: a.specialist,
                count: b.metrics.count,
                before: b.metrics,
                after: a.metrics,
                delta: MetricDelta::between(&b.metrics, &a.metrics),
            })
        })
        .collect();
    Ok(DeltaReport {
        before_stage: before.stage.clone(),
        after_stage: after.stage.clone(),
        dataset_hash: before.dataset_hash.clone(),
        per_device,
        overall: MetricDelta::between(&before.aggregates.overall, &after.aggregates.overall),
    })
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Output document flavour for [`render_report`] and [`render_delta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

fn table(header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|(_, c)| c[i].len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, " | {h:>w$}");
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:label_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
    }
    out
}

pub fn render_report(report: &EvalReport, format: Format) -> String {
    if format == Format::Json {
        return report.to_json();
    }
    let mut cols: Vec<(String, Option<Metrics>)> = report
        .per_device
        .iter()
        .map(|r| (r.device.clone(), Some(r.metrics)))
        .collect();
    let agg = &report.aggregates;
    cols.push(("Overall".into(), Some(agg.overall)));
    cols.push(("Real".into(), agg.real));
    cols.push(("Seen".into(), agg.seen));
    cols.push(("Unseen".into(), agg.unseen));
    let cell = |m: &Option<Metrics>, f: &dyn Fn(&Metrics) -> String| m.as_ref().map_or("-".to_string(), f);
    let header: Vec<String> = cols.iter().map(|(h, _)| h.clone()).collect();
    let rows = vec![
        ("Accuracy".to_string(), cols.iter().map(|(_, m)| cell(m, &|m| format!("{:.2}", m.accuracy))).collect()),
        ("Log loss".to_string(), cols.iter().map(|(_, m)| cell(m, &|m| format!("{:.4}", m.log_loss))).collect()),
        ("Count".to_string(), cols.iter().map(|(_, m)| cell(m, &|m| m.count.to_string())).collect()),
    ];
    let mut out = format!("stage: {}  model: {}\n", report.stage, short(&report.model_id));
    out += &table(&header, &rows);
    for w in &report.warnings {
        out += &format!("warning: {w}\n");
    }
    out
}

/// Accuracy before, after and the improvement per device. Devices that kept
/// the base model show "-" in the after and improvement rows.
pub fn render_delta(delta: &DeltaReport, format: Format) -> String {
    if format == Format::Json {
        return delta.to_json();
    }
    let mut header: Vec<String> = delta.per_device.iter().map(|r| r.device.clone()).collect();
    header.push("Overall".into());
    let pct = |x: f64| format!("{x:.2}");
    let signed = |x: f64| format!("{x:+.2}");
    let n: usize = delta.per_device.iter().map(|r| r.count).sum();
    let weighted = |f: &dyn Fn(&DeltaRow) -> f64| {
        delta.per_device.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / n.max(1) as f64
    };
    let mut before: Vec<String> = delta.per_device.iter().map(|r| pct(r.before.accuracy)).collect();
    before.push(pct(weighted(&|r| r.before.accuracy)));
    let mut after: Vec<String> = delta
        .per_device
        .iter()
        .map(|r| if r.specialist { pct(r.after.accuracy) } else { "-".into() })
        .collect();
    after.push(pct(weighted(&|r| r.after.accuracy)));
    let mut gain: Vec<String> = delta
        .per_device
        .iter()
        .map(|r| if r.specialist { signed(r.delta.accuracy) } else { "-".into() })
        .collect();
    gain.push(signed(delta.overall.accuracy));
    let rows = vec![
        (format!("Before ({})", delta.before_stage), before),
        (format!("After ({})", delta.after_stage), after),
        ("Improvement".to_string(), gain),
    ];
    table(&header, &rows)
}
