//! End-to-end run: teachers, distillation, fine-tuning, reports.
//!
//! Every stage leaves a manifest under `stages/` recording the config hash,
//! the seed and the SHA-256 of its inputs and outputs. A rerun skips any
//! stage whose manifest still matches and whose outputs are intact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{default_roster, generate, read_dataset, write_dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{delta, evaluate, render_delta, render_report, DeltaReport, EvalReport, Format};
use crate::model::Mlp;
use crate::pipeline::{distill_student, dsft, train_teacher, MetricRecord, ModelBundle, TeacherEnsemble, TrainConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the run directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Written next to a generated dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub file: String,
    pub sha256: String,
    pub seed: u64,
    pub config_hash: String,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub devices: Vec<String>,
    pub version: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub skip_dsft: bool,
    /// Recompute every stage even when its manifest matches.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub before: EvalReport,
    pub after: EvalReport,
    pub delta: DeltaReport,
    /// Stages that were recomputed (the rest were resumed).
    pub computed: Vec<String>,
    pub warnings: Vec<String>,
}

/// Seed of one stage, derived from the experiment seed and the stage name.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// `base` with the seed [`run`] uses for `stage`. Teacher stages are named
/// `teacher_{index}_{ce|dafa}`; the others are `distill` and `dsft`.
pub fn stage_train_config(seed: u64, base: &TrainConfig, stage: &str) -> TrainConfig {
    TrainConfig {
        seed: stage_seed(seed, stage),
        ..*base
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, history: &[MetricRecord]) -> Result<()> {
    let text: String = history.iter().map(|r| r.to_json_line() + "\n").collect();
    write_file(path, text)
}

/// Generates the dataset described by `cfg` (seeded by `cfg.experiment.seed`).
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let seed = cfg.experiment.seed;
    let roster = default_roster(cfg.scene.freq_bins, &cfg.channels, seed);
    generate(&cfg.scene, &roster, cfg.split, seed)
}

/// Writes the dataset and its manifest (`<path>.json`). Refuses to replace an
/// existing file unless `force` is set.
pub fn write_dataset_with_manifest(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    path: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    let manifest_path = manifest_path_for(path);
    for p in [path, manifest_path.as_path()] {
        if p.exists() && !force {
            let e = std::io::Error::new(std::io::ErrorKind::AlreadyExists, "file exists, pass --force to overwrite");
            return Err(Error::io(p, e));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_dataset(split, path)?;
    let manifest = DatasetManifest {
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_file(path)?,
        seed: cfg.experiment.seed,
        config_hash: cfg.hash(),
        train_samples: split.train.len(),
        validation_samples: split.validation.len(),
        devices: split.roster.iter().map(|d| d.id.clone()).collect(),
        version: VERSION.into(),
    };
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn manifest_path_for(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    dataset.with_file_name(name)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    config_hash: String,
    force: bool,
    computed: Vec<String>,
}

impl Run<'_> {
    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{stage}.json"))
    }

    /// Whether `stage` can be resumed: its manifest matches and every output
    /// still hashes to the recorded value.
    fn resumable(&self, stage: &str, seed: u64, inputs: &BTreeMap<String, String>) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(self.manifest_path(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<StageManifest>(&text) else {
            return false;
        };
        m.version == VERSION
            && m.config_hash == self.config_hash
            && m.seed == seed
            && &m.inputs == inputs
            && m.outputs
                .iter()
                .all(|(file, hash)| sha256_file(&self.dir.join(file)).is_ok_and(|h| &h == hash))
    }

    fn finish(&mut self, stage: &str, seed: u64, inputs: BTreeMap<String, String>, outputs: &[&str]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for file in outputs {
            hashes.insert(file.to_string(), sha256_file(&self.dir.join(file))?);
        }
        let m = StageManifest {
            stage: stage.into(),
            version: VERSION.into(),
            config_hash: self.config_hash.clone(),
            seed,
            inputs,
            outputs: hashes,
        };
        write_file(&self.manifest_path(stage), serde_json::to_string_pretty(&m)? + "\n")?;
        self.computed.push(stage.into());
        Ok(())
    }

    fn train_cfg(&self, base: &TrainConfig, stage: &str) -> TrainConfig {
        stage_train_config(self.cfg.experiment.seed, base, stage)
    }
}

fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Runs every stage of `cfg` into `cfg.experiment.out_dir`.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.experiment.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    let mut run = Run {
        cfg,
        config_hash: cfg.hash(),
        dir,
        force: opts.force,
        computed: Vec::new(),
    };
    let seed = cfg.experiment.seed;

    // dataset
    let data = match &cfg.experiment.dataset {
        Some(path) => {
            let split = read_dataset(path)?;
            check_dataset(cfg, &split)?;
            split
        }
        None => {
            let path = run.dir.join("dataset.bin");
            let no_inputs = BTreeMap::new();
            if run.resumable("dataset", seed, &no_inputs) {
                read_dataset(&path)?
            } else {
                let split = generate_dataset(cfg)?;
                write_dataset_with_manifest(cfg, &split, &path, true)?;
                run.finish("dataset", seed, no_inputs, &["dataset.bin"])?;
                split
            }
        }
    };
    data.check_no_leak()?;
    let data_hash = data.content_hash();

    // teachers
    let mut teachers = Vec::new();
    for (i, mode) in cfg.ensemble.members.iter().enumerate() {
        let tag = match mode {
            crate::pipeline::TeacherMode::CeOnly => "ce",
            crate::pipeline::TeacherMode::Dafa => "dafa",
        };
        let stage = format!("teacher_{i}_{tag}");
        let file = format!("teachers/{stage}.ckpt");
        let tcfg = run.train_cfg(&cfg.train_teacher, &stage);
        let ins = inputs(&[("dataset", &data_hash)]);
        let model = if run.resumable(&stage, tcfg.seed, &ins) {
            Mlp::load(run.dir.join(&file))?
        } else {
            log::info!("training {stage}");
            let out = train_teacher(&data, &cfg.teacher, &tcfg, *mode, &cfg.dafa, &cfg.augmentation)?;
            write_file(&run.dir.join(&file), out.model.to_bytes())?;
            let metrics = format!("stages/{stage}.metrics.jsonl");
            write_metrics(&run.dir.join(&metrics), &out.history)?;
            run.finish(&stage, tcfg.seed, ins, &[&file, &metrics])?;
            out.model
        };
        teachers.push(model);
    }
    let ensemble = TeacherEnsemble::new(teachers)?;

    // distillation
    let teacher_sums = ensemble.checksums().join(",");
    let dcfg = run.train_cfg(&cfg.train_distill, "distill");
    let ins = inputs(&[("dataset", &data_hash), ("teachers", &teacher_sums)]);
    let student = if run.resumable("distill", dcfg.seed, &ins) {
        Mlp::load(run.dir.join("student.ckpt"))?
    } else {
        log::info!("distilling student");
        let out = distill_student(
            &data,
            &cfg.student,
            &ensemble,
            &cfg.kd,
            &dcfg,
            &cfg.augmentation,
            &cfg.budget,
        )?;
        write_file(&run.dir.join("student.ckpt"), out.model.to_bytes())?;
        write_metrics(&run.dir.join("stages/distill.metrics.jsonl"), &out.history)?;
        run.finish("distill", dcfg.seed, ins, &["student.ckpt", "stages/distill.metrics.jsonl"])?;
        out.model
    };

    // fine-tuning
    let mut warnings = Vec::new();
    let fcfg = run.train_cfg(&cfg.train_dsft, "dsft");
    let ins = inputs(&[
        ("dataset", &data_hash),
        ("student", &student.checksum()),
        ("skip", if opts.skip_dsft { "true" } else { "false" }),
    ]);
    let bundle_dir = run.dir.join("bundle");
    let bundle = if run.resumable("dsft", fcfg.seed, &ins) {
        ModelBundle::load(&bundle_dir, &cfg.budget)?
    } else {
        let (bundle, history) = if opts.skip_dsft {
            (ModelBundle::new(student.clone(), BTreeMap::new(), &cfg.budget)?, Vec::new())
        } else {
            log::info!("fine-tuning per device");
            // fine-tuning runs on clean samples; augmentation is a teacher and
            // distillation tool here
            let out = dsft(&student, &data, &fcfg, &Default::default(), &cfg.budget)?;
            warnings.extend(out.warnings);
            (out.bundle, out.history)
        };
        if bundle_dir.exists() {
            std::fs::remove_dir_all(&bundle_dir).map_err(|e| Error::io(&bundle_dir, e))?;
        }
        bundle.save(&bundle_dir)?;
        write_metrics(&run.dir.join("stages/dsft.metrics.jsonl"), &history)?;
        let mut outs = vec!["bundle/bundle.json".to_string(), "bundle/base.ckpt".to_string()];
        outs.extend(bundle.specialists().keys().map(|id| format!("bundle/specialist_{id}.ckpt")));
        outs.push("stages/dsft.metrics.jsonl".into());
        let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
        run.finish("dsft", fcfg.seed, ins, &refs)?;
        bundle
    };

    // reports are cheap and always rewritten
    let base_only = ModelBundle::new(student, BTreeMap::new(), &cfg.budget)?;
    let stamp = |mut r: EvalReport, stage: &str| {
        r.stage = stage.into();
        r.config_hash = Some(run.config_hash.clone());
        r.seed = Some(seed);
        r
    };
    let before = stamp(evaluate(&base_only, &data, true)?, "before_dsft");
    let after = stamp(evaluate(&bundle, &data, true)?, "after_dsft");
    let d = delta(&before, &after)?;
    let reports = run.dir.join("reports");
    write_file(&reports.join("eval_before.json"), render_report(&before, Format::Json))?;
    write_file(&reports.join("eval_before.txt"), render_report(&before, Format::Text))?;
    write_file(&reports.join("eval_after.json"), render_report(&after, Format::Json))?;
    write_file(&reports.join("eval_after.txt"), render_report(&after, Format::Text))?;
    write_file(&reports.join("delta.json"), render_delta(&d, Format::Json))?;
    write_file(&reports.join("delta.txt"), render_delta(&d, Format::Text))?;

    Ok(RunSummary {
        out_dir: run.dir.clone(),
        before,
        after,
        delta: d,
        computed: run.computed,
        warnings,
    })
}

/// A dataset read from disk must match the configured scene.
fn check_dataset(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<()> {
    if split.feature_dim() != cfg.scene.feature_dim() || split.num_classes != cfg.scene.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes of {}x{} features, config expects {} of {}x{}",
            split.num_classes,
            split.freq_bins,
            split.time_frames,
            cfg.scene.num_classes,
            cfg.scene.freq_bins,
            cfg.scene.time_frames
        )));
    }
    Ok(())
}
