use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enforce_budget, BudgetReport, ComplexityBudget, Mlp};
use crate::tensor::{softmax_rows, Tensor};

use super::MetricRecord;

const MANIFEST: &str = "bundle.json";
const BASE_FILE: &str = "base.ckpt";

/// A general model plus one specialist per known device.
///
/// Inputs from a device without a specialist (or with no device label) go to
/// the general model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    base: Mlp,
    specialists: BTreeMap<String, Mlp>,
    budget: BudgetReport,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    base: Entry,
    specialists: BTreeMap<String, Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    file: String,
    sha256: String,
}

impl ModelBundle {
    /// Every member must share the base architecture, which must fit `budget`.
    pub fn new(base: Mlp, specialists: BTreeMap<String, Mlp>, budget: &ComplexityBudget) -> Result<Self> {
        let report = enforce_budget(base.spec(), budget);
        if !report.passed {
            return Err(Error::Budget(report.violations().join("; ")));
        }
        for (id, m) in &specialists {
            if !valid_device_id(id) {
                return Err(Error::Validation(format!("unusable device id {id:?}")));
            }
            if m.spec() != base.spec() {
                return Err(Error::Validation(format!(
                    "specialist for {id} has a different architecture than the base model"
                )));
            }
        }
        Ok(Self {
            base,
            specialists,
            budget: report,
        })
    }

    pub fn base(&self) -> &Mlp {
        &self.base
    }

    pub fn specialists(&self) -> &BTreeMap<String, Mlp> {
        &self.specialists
    }

    /// Budget report of one member; all members share it.
    pub fn budget(&self) -> &BudgetReport {
        &self.budget
    }

    pub fn has_specialist(&self, device: &str) -> bool {
        self.specialists.contains_key(device)
    }

    /// Model used for inputs recorded on `device`.
    pub fn route(&self, device: Option<&str>) -> &Mlp {
        device
            .and_then(|d| self.specialists.get(d))
            .unwrap_or(&self.base)
    }

    pub fn logits(&self, features: &Tensor, device: Option<&str>) -> Result<Tensor> {
        Ok(self.route(device).forward(features)?.logits)
    }

    /// Class probabilities for a batch recorded on a single device.
    pub fn predict(&self, features: &Tensor, device: Option<&str>) -> Result<Tensor> {
        softmax_rows(&self.logits(features, device)?, 1.0)
    }

    /// Writes the members and a manifest of their checksums into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.base.save(dir.join(BASE_FILE))?;
        let mut specialists = BTreeMap::new();
        for (id, m) in &self.specialists {
            let file = format!("specialist_{id}.ckpt");
            m.save(dir.join(&file))?;
            specialists.insert(
                id.clone(),
                Entry {
                    file,
                    sha256: m.checksum(),
                },
            );
        }
        let manifest = Manifest {
            base: Entry {
                file: BASE_FILE.into(),
                sha256: self.base.checksum(),
            },
            specialists,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a bundle written by [`save`](Self::save), verifying checksums.
    pub fn load(dir: impl AsRef<Path>, budget: &ComplexityBudget) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let base = load_entry(dir, &manifest.base)?;
        let mut specialists = BTreeMap::new();
        for (id, entry) in &manifest.specialists {
            specialists.insert(id.clone(), load_entry(dir, entry)?);
        }
        Self::new(base, specialists, budget)
    }
}

fn load_entry(dir: &Path, entry: &Entry) -> Result<Mlp> {
    if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
        return Err(Error::Validation(format!("bad checkpoint name {:?}", entry.file)));
    }
    let model = Mlp::load(dir.join(&entry.file))?;
    if model.checksum() != entry.sha256 {
        return Err(Error::Validation(format!("{}: checksum mismatch", entry.file)));
    }
    Ok(model)
}

fn valid_device_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Result of device-specific fine-tuning.
#[derive(Debug, Clone)]
pub struct DsftOutcome {
    pub bundle: ModelBundle,
    /// Devices that were skipped, with the reason.
    pub warnings: Vec<String>,
    pub history: Vec<MetricRecord>,
}
