//! Synthetic device-shifted scene data.
//!
//! Each class has a latent prototype over an `F x T` frequency-time grid.
//! A recording device acts as a per-frequency channel: it scales every bin
//! by a gain, adds an offset and some sensor noise. Training data only ever
//! comes from seen devices; validation covers the full roster.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DAFA";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    /// Standard deviation of the class prototypes.
    pub prototype_scale: f64,
    pub within_class_noise: f64,
}

impl SceneSpec {
    pub fn feature_dim(&self) -> usize {
        self.freq_bins * self.time_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least two scene classes".into()));
        }
        if self.freq_bins == 0 || self.time_frames == 0 {
            return Err(Error::Validation("feature grid must be at least 1x1".into()));
        }
        if !(self.prototype_scale >= 0.0 && self.within_class_noise >= 0.0) {
            return Err(Error::Validation("scene scales must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            freq_bins: 8,
            time_frames: 16,
            prototype_scale: 0.2,
            within_class_noise: 1.0,
        }
    }
}

/// Channel model of one recording device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_std: f64,
    pub seen: bool,
    pub real: bool,
}

impl DeviceSpec {
    /// Pass-through channel.
    pub fn identity(id: &str, freq_bins: usize, seen: bool) -> Self {
        Self {
            id: id.to_string(),
            gain: vec![1.0; freq_bins],
            offset: vec![0.0; freq_bins],
            noise_std: 0.0,
            seen,
            real: false,
        }
    }
}

/// Spread of the randomly drawn device channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpread {
    /// Standard deviation of the per-bin log gain.
    pub log_gain: f64,
    /// Standard deviation of the per-bin offset.
    pub offset: f64,
    pub noise_std: f64,
}

impl Default for ChannelSpread {
    fn default() -> Self {
        Self {
            log_gain: 0.4,
            offset: 0.25,
            noise_std: 0.05,
        }
    }
}

pub const DEFAULT_SEEN: [&str; 6] = ["A", "B", "C", "S1", "S2", "S3"];
pub const DEFAULT_UNSEEN: [&str; 3] = ["S4", "S5", "S6"];

/// Nine-device roster: A, B, C (real) and S1-S3 seen, S4-S6 unseen.
pub fn default_roster(freq_bins: usize, spread: &ChannelSpread, seed: u64) -> Vec<DeviceSpec> {
    let mut rng = stream(seed, 7);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    DEFAULT_SEEN
        .iter()
        .map(|id| (id, true))
        .chain(DEFAULT_UNSEEN.iter().map(|id| (id, false)))
        .map(|(id, seen)| DeviceSpec {
            id: id.to_string(),
            gain: (0..freq_bins)
                .map(|_| (spread.log_gain * normal.sample(&mut rng)).exp())
                .collect(),
            offset: (0..freq_bins)
                .map(|_| spread.offset * normal.sample(&mut rng))
                .collect(),
            noise_std: spread.noise_std,
            seen,
            real: matches!(*id, "A" | "B" | "C"),
        })
        .collect()
}

/// Roster entry stored alongside the samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub id: String,
    pub seen: bool,
    pub real: bool,
}

/// Flat store of labelled samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub devices: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, features: &[f64], label: usize, device: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.features.extend_from_slice(features);
        self.labels.push(label);
        self.devices.push(device);
    }

    /// Samples recorded by one device, in original order.
    pub fn filter_device(&self, device: usize) -> Samples {
        let mut out = Samples::new(self.dim);
        for i in (0..self.len()).filter(|&i| self.devices[i] == device) {
            out.push(self.feature_row(i), self.labels[i], device);
        }
        out
    }

    pub fn features_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.features.clone())
    }

    /// Gathers `indices` into a batch with one-hot targets.
    pub fn batch(&self, indices: &[usize], num_classes: usize, freq_bins: usize) -> Result<LabeledBatch> {
        if indices.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut targets = vec![0.0; indices.len() * num_classes];
        let mut devices = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.extend_from_slice(self.feature_row(i));
            targets[r * num_classes + self.labels[i]] = 1.0;
            devices.push(self.devices[i]);
        }
        LabeledBatch::new(
            Tensor::matrix(indices.len(), self.dim, features),
            Tensor::matrix(indices.len(), num_classes, targets),
            devices,
            freq_bins,
        )
    }
}

/// Features, soft scene targets and device ids of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub targets: Tensor,
    pub device_ids: Vec<usize>,
    /// Row `i` of `features` is an `freq_bins x (dim / freq_bins)` grid.
    pub freq_bins: usize,
}

impl LabeledBatch {
    pub fn new(features: Tensor, targets: Tensor, device_ids: Vec<usize>, freq_bins: usize) -> Result<Self> {
        let n = features.rows();
        if targets.rows() != n || device_ids.len() != n {
            return Err(Error::dim("labeled_batch", features.shape(), targets.shape()));
        }
        if freq_bins == 0 || !features.cols().is_multiple_of(freq_bins) {
            return Err(Error::Validation(format!(
                "feature width {} is not a multiple of {freq_bins} frequency bins",
                features.cols()
            )));
        }
        crate::losses::check_row_stochastic(&targets, 1e-9)?;
        Ok(Self {
            features,
            targets,
            device_ids,
            freq_bins,
        })
    }

    pub fn len(&self) -> usize {
        self.device_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.device_ids.is_empty()
    }

    pub fn time_frames(&self) -> usize {
        self.features.cols() / self.freq_bins
    }
}

/// Training data from seen devices plus validation data from every device.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub roster: Vec<DeviceInfo>,
    pub num_classes: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub train: Samples,
    pub validation: Samples,
}

impl DatasetSplit {
    pub fn feature_dim(&self) -> usize {
        self.freq_bins * self.time_frames
    }

    pub fn seen_devices(&self) -> Vec<usize> {
        (0..self.roster.len()).filter(|&d| self.roster[d].seen).collect()
    }

    pub fn device_index(&self, id: &str) -> Option<usize> {
        self.roster.iter().position(|d| d.id == id)
    }

    /// Fails if an unseen-device sample sits in the training part.
    pub fn check_no_leak(&self) -> Result<()> {
        match self.train.devices.iter().find(|&&d| !self.roster[d].seen) {
            Some(&d) => Err(Error::Validation(format!(
                "unseen device {} leaked into training data",
                self.roster[d].id
            ))),
            None => Ok(()),
        }
    }

    /// SHA-256 over the serialized file image.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// SHA-256 over the validation records and roster only.
    pub fn validation_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.roster {
            h.update(d.id.as_bytes());
            h.update([d.seen as u8, d.real as u8]);
        }
        h.update((self.validation.len() as u64).to_le_bytes());
        for i in 0..self.validation.len() {
            h.update((self.validation.devices[i] as u32).to_le_bytes());
            h.update((self.validation.labels[i] as u32).to_le_bytes());
            for v in self.validation.feature_row(i) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            self.train.len(),
            self.validation.len(),
            self.freq_bins,
            self.time_frames,
            self.num_classes,
            self.roster.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for d in &self.roster {
            out.extend_from_slice(&(d.id.len() as u16).to_le_bytes());
            out.extend_from_slice(d.id.as_bytes());
            out.push(d.seen as u8 | (d.real as u8) << 1);
        }
        for part in [&self.train, &self.validation] {
            for i in 0..part.len() {
                out.extend_from_slice(&(part.devices[i] as u16).to_le_bytes());
                out.extend_from_slice(&(part.labels[i] as u16).to_le_bytes());
                for &v in part.feature_row(i) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected \"DAFA\""));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let n_train = r.u32()? as usize;
        let n_val = r.u32()? as usize;
        let freq_bins = r.u32()? as usize;
        let time_frames = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let n_devices = r.u32()? as usize;
        if freq_bins == 0 || time_frames == 0 || num_classes < 2 {
            return Err(r.error_at(10, "degenerate header counts"));
        }
        let mut roster = Vec::with_capacity(n_devices.min(1 << 16));
        for _ in 0..n_devices {
            let len = r.u16()? as usize;
            let at = r.pos;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at, "device id is not utf-8"))?
                .to_string();
            let flags = r.take(1)?[0];
            roster.push(DeviceInfo {
                id,
                seen: flags & 1 != 0,
                real: flags & 2 != 0,
            });
        }
        let dim = freq_bins * time_frames;
        let mut parts = [Samples::new(dim), Samples::new(dim)];
        let mut row = vec![0.0; dim];
        for (part, n) in parts.iter_mut().zip([n_train, n_val]) {
            for _ in 0..n {
                let at = r.pos;
                let device = r.u16()? as usize;
                let label = r.u16()? as usize;
                if device >= n_devices || label >= num_classes {
                    return Err(r.error_at(at, "record index out of range"));
                }
                for v in row.iter_mut() {
                    *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
                }
                part.push(&row, label, device);
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after last record"));
        }
        let [train, validation] = parts;
        Ok(Self {
            roster,
            num_classes,
            freq_bins,
            time_frames,
            train,
            validation,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error_at(self.pos, &format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        }
    }
}

pub fn write_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&split.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DatasetSplit::from_bytes(&bytes)
}

/// Per-cell sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train_per_cell: usize,
    pub val_per_cell: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_per_cell: 120,
            val_per_cell: 60,
        }
    }
}

/// Draws a dataset. Every (class, device) cell gets `val_per_cell`
/// validation samples; seen devices additionally get `train_per_cell`
/// training samples. Features are rounded to `f32` so files round-trip.
pub fn generate(scene: &SceneSpec, devices: &[DeviceSpec], sizes: SplitSizes, seed: u64) -> Result<DatasetSplit> {
    scene.validate()?;
    let seen = devices.iter().filter(|d| d.seen).count();
    if seen < 2 || seen == devices.len() {
        return Err(Error::Validation(format!(
            "need at least two seen and one unseen device, got {seen} seen of {}",
            devices.len()
        )));
    }
    for (i, d) in devices.iter().enumerate() {
        if devices[..i].iter().any(|o| o.id == d.id) {
            return Err(Error::Validation(format!("duplicate device id {}", d.id)));
        }
        if d.gain.len() != scene.freq_bins || d.offset.len() != scene.freq_bins {
            return Err(Error::Validation(format!(
                "device {} channel must have {} bins",
                d.id, scene.freq_bins
            )));
        }
        if d.gain.iter().any(|&g| !(g > 0.0)) || !(d.noise_std >= 0.0) {
            return Err(Error::Validation(format!("device {} has a non-positive gain", d.id)));
        }
    }

    let dim = scene.feature_dim();
    let mut proto_rng = stream(seed, 1);
    let prototypes: Vec<Vec<f64>> = (0..scene.num_classes)
        .map(|_| gaussian_vec(&mut proto_rng, scene.freq_bins, scene.prototype_scale))
        .collect();

    let mut train_rng = stream(seed, 2);
    let mut val_rng = stream(seed, 3);
    let mut train = Samples::new(dim);
    let mut validation = Samples::new(dim);
    let mut x = vec![0.0; dim];
    for (d, dev) in devices.iter().enumerate() {
        for (k, proto) in prototypes.iter().enumerate() {
            let cells = [
                (&mut train, &mut train_rng, if dev.seen { sizes.train_per_cell } else { 0 }),
                (&mut validation, &mut val_rng, sizes.val_per_cell),
            ];
            for (part, rng, count) in cells {
                for _ in 0..count {
                    let latent = gaussian_vec(rng, dim, scene.within_class_noise);
                    let sensor = gaussian_vec(rng, dim, dev.noise_std);
                    for f in 0..scene.freq_bins {
                        for t in 0..scene.time_frames {
                            let j = f * scene.time_frames + t;
                            let v = dev.gain[f] * (proto[f] + latent[j]) + dev.offset[f] + sensor[j];
                            x[j] = v as f32 as f64;
                        }
                    }
                    part.push(&x, k, d);
                }
            }
        }
    }

    Ok(DatasetSplit {
        roster: devices
            .iter()
            .map(|d| DeviceInfo {
                id: d.id.clone(),
                seen: d.seen,
                real: d.real,
            })
            .collect(),
        num_classes: scene.num_classes,
        freq_bins: scene.freq_bins,
        time_frames: scene.time_frames,
        train,
        validation,
    })
}

/// Index partition of `samples` for one epoch.
///
/// With `shuffle`, each device pool is shuffled and the pools are then
/// interleaved round-robin, so every batch mixes devices whenever more than
/// one is present. The last partial batch is kept.
pub fn batch_indices(samples: &Samples, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let order: Vec<usize> = if shuffle {
        let mut rng = stream(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), 11);
        let mut pools: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &d) in samples.devices.iter().enumerate() {
            pools.entry(d).or_default().push(i);
        }
        let mut pools: Vec<Vec<usize>> = pools.into_values().collect();
        for p in pools.iter_mut() {
            p.shuffle(&mut rng);
        }
        let mut order = Vec::with_capacity(samples.len());
        let longest = pools.iter().map(Vec::len).max().unwrap_or(0);
        for round in 0..longest {
            let mut turn: Vec<usize> = (0..pools.len()).collect();
            turn.shuffle(&mut rng);
            order.extend(turn.into_iter().filter_map(|p| pools[p].get(round).copied()));
        }
        order
    } else {
        (0..samples.len()).collect()
    };
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batches of one epoch, see [`batch_indices`].
pub fn batches(
    samples: &Samples,
    num_classes: usize,
    freq_bins: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<LabeledBatch>> {
    batch_indices(samples, batch_size, seed, epoch, shuffle)
        .iter()
        .map(|idx| samples.batch(idx, num_classes, freq_bins))
        .collect()
}

/// Independent ChaCha stream `stream_id` under `seed`.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("std >= 0");
    (0..n).map(|_| normal.sample(rng)).collect()
}
