//! Experiment configuration: one TOML file, one flat section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{Augmentation, FreqMixStyleConfig, MixupConfig};
use crate::data::{ChannelSpread, SceneSpec, SplitSizes};
use crate::error::{Error, Result};
use crate::losses::{DafaConfig, KdConfig};
use crate::model::{enforce_budget, Activation, ComplexityBudget, NetworkSpec};
use crate::pipeline::{TeacherMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Existing dataset file; when absent the dataset is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    /// One teacher per entry, trained in order.
    pub members: Vec<TeacherMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub scene: SceneSpec,
    pub channels: ChannelSpread,
    pub split: SplitSizes,
    pub teacher: NetworkSpec,
    pub ensemble: EnsembleSection,
    pub student: NetworkSpec,
    pub kd: KdConfig,
    pub dafa: DafaConfig,
    #[serde(default)]
    pub augmentation: Augmentation,
    pub train_teacher: TrainConfig,
    pub train_distill: TrainConfig,
    pub train_dsft: TrainConfig,
    pub budget: ComplexityBudget,
}

fn net(input_dim: usize, hidden: &[usize], embedding_dim: usize, num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        input_dim,
        hidden_dims: hidden.to_vec(),
        embedding_dim,
        num_classes,
        activation: Activation::Relu,
    }
}

impl ExperimentConfig {
    /// Full-length schedule: 500 distillation epochs at batch 128 and
    /// peak lr 5e-4, tau 2, lambda 0.98, alignment weights 0.01, and 100
    /// fine-tuning epochs per device at lr 1e-5.
    pub fn full() -> Self {
        let scene = SceneSpec::default();
        let dim = scene.feature_dim();
        let classes = scene.num_classes;
        Self {
            experiment: ExperimentSection {
                seed: 0,
                out_dir: PathBuf::from("runs/full"),
                dataset: None,
            },
            teacher: net(dim, &[128], 64, classes),
            student: net(dim, &[64], 32, classes),
            scene,
            channels: ChannelSpread::default(),
            split: SplitSizes::default(),
            ensemble: EnsembleSection {
                members: vec![TeacherMode::CeOnly, TeacherMode::Dafa],
            },
            kd: KdConfig::default(),
            dafa: DafaConfig::default(),
            augmentation: Augmentation {
                mixup: Some(MixupConfig::default()),
                freq_mixstyle: Some(FreqMixStyleConfig::default()),
            },
            train_teacher: TrainConfig {
                head_init_scale: 1.0,
                ..TrainConfig::default()
            },
            train_distill: TrainConfig::default(),
            train_dsft: TrainConfig::fine_tune_default(),
            budget: ComplexityBudget::default(),
        }
    }

    /// Shortened schedule that finishes in about a minute on one CPU core.
    /// The alignment weights are larger than in [`full`](Self::full) because the
    /// centroid term is not scale-free and these embeddings are small.
    pub fn desk() -> Self {
        let base = Self::full();
        Self {
            experiment: ExperimentSection {
                out_dir: PathBuf::from("runs/desk"),
                ..base.experiment
            },
            dafa: DafaConfig {
                lambda_dcsl: 0.07,
                lambda_gdal: 0.6,
                ..base.dafa
            },
            train_teacher: TrainConfig {
                epochs: 40,
                peak_lr: 1e-3,
                ..base.train_teacher
            },
            train_distill: TrainConfig {
                epochs: 40,
                peak_lr: 1e-3,
                ..base.train_distill
            },
            train_dsft: TrainConfig {
                epochs: 10,
                peak_lr: 1e-4,
                ..base.train_dsft
            },
            ..base
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without [`validate`](Self::validate).
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Checks that the sections agree with each other and that the student
    /// fits the budget. Budget failures are reported as [`Error::Budget`].
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.scene.validate().map_err(cfg_err)?;
        self.teacher.validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
        self.student.validate().map_err(|e| Error::Config(format!("student: {e}")))?;
        let dim = self.scene.feature_dim();
        for (name, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            if spec.input_dim != dim {
                return Err(Error::Config(format!(
                    "{name}.input_dim is {} but scene features have {dim} values",
                    spec.input_dim
                )));
            }
            if spec.num_classes != self.scene.num_classes {
                return Err(Error::Config(format!(
                    "{name}.num_classes is {} but the scene has {} classes",
                    spec.num_classes, self.scene.num_classes
                )));
            }
        }
        if self.ensemble.members.is_empty() {
            return Err(Error::Config("ensemble.members must not be empty".into()));
        }
        if !(self.channels.log_gain >= 0.0 && self.channels.offset >= 0.0 && self.channels.noise_std >= 0.0) {
            return Err(Error::Config("channel spreads must be >= 0".into()));
        }
        if self.split.train_per_cell == 0 || self.split.val_per_cell == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        self.kd.validate().map_err(cfg_err)?;
        self.dafa.validate().map_err(cfg_err)?;
        if let Some(m) = &self.augmentation.mixup {
            m.validate().map_err(cfg_err)?;
        }
        if let Some(m) = &self.augmentation.freq_mixstyle {
            m.validate().map_err(cfg_err)?;
        }
        for (name, t, zero_ok) in [
            ("train_teacher", &self.train_teacher, false),
            ("train_distill", &self.train_distill, false),
            ("train_dsft", &self.train_dsft, true),
        ] {
            t.validate(zero_ok).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        let report = enforce_budget(&self.student, &self.budget);
        if !report.passed {
            return Err(Error::Budget(format!("student: {}", report.violations().join("; "))));
        }
        Ok(())
    }
}
