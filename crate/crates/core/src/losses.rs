//! Training objectives: cross-entropy, the temperature-scaled distillation
//! loss, and the device-aware feature alignment terms.
//!
//! The alignment terms operate on a batch of embeddings `X` (`n x e`) with a
//! device id per row. Device centroids are computed as `A X`, where row `d`
//! of the constant matrix `A` holds `1/n_d` at the columns of device `d`.
//!
//! * **DCSL** is `S_W / (S_B + eps)`, with `S_W` the mean squared distance of
//!   each sample to its own device centroid and `S_B` the mean squared
//!   distance over unordered pairs of distinct device centroids. With fewer
//!   than two devices in the batch it is exactly zero.
//! * **GDAL** is the mean over devices of `|mu_d - mu_G|^2`, `mu_G` being the
//!   mean of all embeddings in the batch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{log_softmax_rows, Tensor};

/// Hyperparameters of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    /// Weight of the distillation term; `1 - lambda` goes to hard-label CE.
    pub lambda: f64,
    pub tau: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.98,
            tau: 2.0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!(
                "kd lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("kd tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Weights of the device alignment regularizers added to CE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DafaConfig {
    pub lambda_dcsl: f64,
    pub lambda_gdal: f64,
    /// Guard added to the between-device scatter.
    pub epsilon: f64,
}

impl Default for DafaConfig {
    fn default() -> Self {
        Self {
            lambda_dcsl: 0.01,
            lambda_gdal: 0.01,
            epsilon: 1e-8,
        }
    }
}

impl DafaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dcsl >= 0.0 && self.lambda_gdal >= 0.0) {
            return Err(Error::Parameter("dafa weights must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "dafa epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-device and global centroids of one batch of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBatchStats {
    pub centroids: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
    pub global_centroid: Vec<f64>,
}

/// Mean over rows of `-sum(target * log_softmax(logits))`.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape != targets.shape() {
        return Err(Error::dim("cross_entropy", &shape, targets.shape()));
    }
    check_row_stochastic(targets, 1e-9)?;
    let n = shape[0] as f64;
    let log_p = logits.log_softmax(1.0)?;
    let t = logits.tape().constant(targets.clone());
    Ok(log_p.mul(t)?.sum().scale(-1.0 / n))
}

/// `(1 - lambda) * CE(z_s, y) + lambda * tau^2 * KL(p_s^tau || p_t^tau)`.
///
/// The KL term is averaged over rows. Teacher logits are plain tensors, so no
/// gradient can reach the teachers.
pub fn kd_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: &Tensor,
    targets: &Tensor,
    cfg: &KdConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let shape = student_logits.shape();
    if shape != teacher_logits.shape() {
        return Err(Error::dim("kd_loss", &shape, teacher_logits.shape()));
    }
    let ce = cross_entropy(student_logits, targets)?;
    let n = shape[0] as f64;
    let tape = student_logits.tape();
    let log_ps = student_logits.log_softmax(cfg.tau)?;
    let log_pt = tape.constant(Tensor::new(
        shape.clone(),
        log_softmax_rows(teacher_logits.data(), shape[1], cfg.tau),
    )?);
    let ps = log_ps.exp();
    let kl = ps.mul(log_ps.sub(log_pt)?)?.sum().scale(1.0 / n);
    ce.scale(1.0 - cfg.lambda)
        .add(kl.scale(cfg.lambda * cfg.tau * cfg.tau))
}

/// Exact centroids of a batch, summed in a canonical row order so that the
/// result does not depend on the order of the batch.
pub fn device_batch_stats(embeddings: &Tensor, device_ids: &[usize]) -> Result<DeviceBatchStats> {
    let n = embeddings.rows();
    if device_ids.is_empty() {
        return Err(Error::Validation("device_batch_stats on an empty batch".into()));
    }
    if device_ids.len() != n {
        return Err(Error::dim("device_batch_stats", embeddings.shape(), &[device_ids.len()]));
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (i, &d) in device_ids.iter().enumerate() {
        groups.entry(d).or_default().push(embeddings.row(i));
    }
    let mut all: Vec<&[f64]> = (0..n).map(|i| embeddings.row(i)).collect();
    let centroids = groups
        .iter_mut()
        .map(|(&d, rows)| (d, canonical_mean(rows)))
        .collect();
    let counts = groups.iter().map(|(&d, rows)| (d, rows.len())).collect();
    Ok(DeviceBatchStats {
        centroids,
        counts,
        global_centroid: canonical_mean(&mut all),
    })
}

fn canonical_mean(rows: &mut [&[f64]]) -> Vec<f64> {
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // running mean: exact when all rows are equal
    let mut mean = vec![0.0; rows[0].len()];
    for (k, r) in rows.iter().enumerate() {
        let w = 1.0 / (k + 1) as f64;
        mean.iter_mut().zip(r.iter()).for_each(|(m, x)| *m += (x - *m) * w);
    }
    mean
}

/// Device grouping of a batch: sorted distinct ids, per-row group index and
/// the `D x n` centroid-averaging matrix.
struct DeviceGroups {
    distinct: Vec<usize>,
    row_group: Vec<usize>,
    averaging: Tensor,
}

fn group_devices(n: usize, device_ids: &[usize]) -> Result<DeviceGroups> {
    if n == 0 || device_ids.is_empty() {
        return Err(Error::Validation("device alignment loss on an empty batch".into()));
    }
    if device_ids.len() != n {
        return Err(Error::dim("device_ids", &[n], &[device_ids.len()]));
    }
    let distinct: Vec<usize> = device_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let row_group: Vec<usize> = device_ids
        .iter()
        .map(|d| distinct.binary_search(d).expect("present"))
        .collect();
    let mut counts = vec![0usize; distinct.len()];
    for &g in &row_group {
        counts[g] += 1;
    }
    let mut a = vec![0.0; distinct.len() * n];
    for (i, &g) in row_group.iter().enumerate() {
        a[g * n + i] = 1.0 / counts[g] as f64;
    }
    Ok(DeviceGroups {
        averaging: Tensor::matrix(distinct.len(), n, a),
        distinct,
        row_group,
    })
}

/// Device cohesion-separation loss `S_W / (S_B + eps)`.
pub fn dcsl<'t>(embeddings: Var<'t>, device_ids: &[usize], epsilon: f64) -> Result<Var<'t>> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    let n = embeddings.shape()[0];
    let groups = group_devices(n, device_ids)?;
    let d = groups.distinct.len();
    if d < 2 {
        // S_B is undefined with a single cluster.
        return Ok(embeddings.scale(0.0).sum());
    }
    let tape = embeddings.tape();
    let centroids = tape.constant(groups.averaging).matmul(embeddings)?;
    let own = centroids.gather_rows(&groups.row_group)?;
    let s_w = embeddings.sub(own)?.square().sum().scale(1.0 / n as f64);

    let pairs = d * (d - 1) / 2;
    let mut diff = vec![0.0; pairs * d];
    let mut row = 0;
    for i in 0..d {
        for j in i + 1..d {
            diff[row * d + i] = 1.0;
            diff[row * d + j] = -1.0;
            row += 1;
        }
    }
    let s_b = tape
        .constant(Tensor::matrix(pairs, d, diff))
        .matmul(centroids)?
        .square()
        .sum()
        .scale(1.0 / pairs as f64);
    s_w.div_scalar(s_b.add_scalar(epsilon))
}

/// Global device alignment loss `mean_d |mu_d - mu_G|^2`.
pub fn gdal<'t>(embeddings: Var<'t>, device_ids: &[usize]) -> Result<Var<'t>> {
    let n = embeddings.shape()[0];
    let groups = group_devices(n, device_ids)?;
    let d = groups.distinct.len();
    let tape = embeddings.tape();
    let centroids = tape.constant(groups.averaging).matmul(embeddings)?;
    let global = tape
        .constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n]))
        .matmul(embeddings)?;
    let global_per_device = tape.constant(Tensor::matrix(d, 1, vec![1.0; d])).matmul(global)?;
    Ok(centroids
        .sub(global_per_device)?
        .square()
        .sum()
        .scale(1.0 / d as f64))
}

/// Objective of the alignment-regularized teacher:
/// `CE + lambda_dcsl * DCSL + lambda_gdal * GDAL`.
pub fn dafa_teacher_loss<'t>(
    logits: Var<'t>,
    embeddings: Var<'t>,
    targets: &Tensor,
    device_ids: &[usize],
    cfg: &DafaConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let (nl, ne) = (logits.shape()[0], embeddings.shape()[0]);
    if nl != ne || nl != device_ids.len() {
        return Err(Error::dim("dafa_teacher_loss", &[nl, ne], &[device_ids.len()]));
    }
    let ce = cross_entropy(logits, targets)?;
    let cohesion = dcsl(embeddings, device_ids, cfg.epsilon)?;
    let alignment = gdal(embeddings, device_ids)?;
    ce.add(cohesion.scale(cfg.lambda_dcsl))?
        .add(alignment.scale(cfg.lambda_gdal))
}

pub(crate) fn check_row_stochastic(targets: &Tensor, tol: f64) -> Result<()> {
    for i in 0..targets.rows() {
        let s: f64 = targets.row(i).iter().sum();
        if (s - 1.0).abs() > tol || targets.row(i).iter().any(|&x| x < 0.0) {
            return Err(Error::Validation(format!(
                "target row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use proptest::prelude::*;

    fn one_hot(rows: &[usize], c: usize) -> Tensor {
        let mut t = Tensor::zeros(rows.len(), c);
        for (i, &k) in rows.iter().enumerate() {
            t.data_mut()[i * c + k] = 1.0;
        }
        t
    }

    // Loop-based references, written without any tensor ops.
    fn brute_centroids(x: &[Vec<f64>], dev: &[usize]) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut ids: Vec<usize> = dev.to_vec();
        ids.sort();
        ids.dedup();
        let e = x[0].len();
        let mut cents = Vec::new();
        for &d in &ids {
            let mut c = vec![0.0; e];
            let mut k = 0.0;
            for (row, &dd) in x.iter().zip(dev) {
                if dd == d {
                    for j in 0..e {
                        c[j] += row[j];
                    }
                    k += 1.0;
                }
            }
            for v in c.iter_mut() {
                *v /= k;
            }
            cents.push(c);
        }
        (ids, cents)
    }

    fn sqdist(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..a.len() {
            s += (a[j] - b[j]) * (a[j] - b[j]);
        }
        s
    }

    pub(crate) fn brute_dcsl(x: &[Vec<f64>], dev: &[usize], eps: f64) -> f64 {
        let (ids, cents) = brute_centroids(x, dev);
        if ids.len() < 2 {
            return 0.0;
        }
        let mut sw = 0.0;
        for (row, d) in x.iter().zip(dev) {
            let g = ids.iter().position(|i| i == d).unwrap();
            sw += sqdist(row, &cents[g]);
        }
        sw /= x.len() as f64;
        let mut sb = 0.0;
        let mut pairs = 0.0;
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                sb += sqdist(&cents[i], &cents[j]);
                pairs += 1.0;
            }
        }
        sw / (sb / pairs + eps)
    }

    pub(crate) fn brute_gdal(x: &[Vec<f64>], dev: &[usize]) -> f64 {
        let (_, cents) = brute_centroids(x, dev);
        let e = x[0].len();
        let mut g = vec![0.0; e];
        for row in x {
            for j in 0..e {
                g[j] += row[j] / x.len() as f64;
            }
        }
        cents.iter().map(|c| sqdist(c, &g)).sum::<f64>() / cents.len() as f64
    }

    fn eval_dcsl(x: &[Vec<f64>], dev: &[usize], eps: f64) -> f64 {
        let tape = Tape::new();
        let v = tape.param(Tensor::from_rows(x).unwrap());
        dcsl(v, dev, eps).unwrap().item()
    }

    fn eval_gdal(x: &[Vec<f64>], dev: &[usize]) -> f64 {
        let tape = Tape::new();
        let v = tape.param(Tensor::from_rows(x).unwrap());
        gdal(v, dev).unwrap().item()
    }

    fn ce_value(logits: &[f64], rows: usize, targets: &Tensor) -> f64 {
        let tape = Tape::new();
        let z = tape.param(Tensor::matrix(rows, logits.len() / rows, logits.to_vec()));
        cross_entropy(z, targets).unwrap().item()
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = ce_value(&[0.0; 10], 1, &one_hot(&[3], 10));
        assert!((uniform - 10f64.ln()).abs() < 1e-12);
        let soft = Tensor::matrix(1, 2, vec![0.7, 0.3]);
        assert!((ce_value(&[0.0, 0.0], 1, &soft) - 2f64.ln()).abs() < 1e-12);
        let confident = ce_value(&[100.0, -100.0], 1, &one_hot(&[0], 2));
        assert!(confident < 1e-80);
    }

    #[test]
    fn ce_rejects_bad_targets() {
        let tape = Tape::new();
        let z = tape.param(Tensor::zeros(1, 2));
        let bad = Tensor::matrix(1, 2, vec![0.5, 0.6]);
        assert!(matches!(cross_entropy(z, &bad), Err(Error::Validation(_))));
        assert!(matches!(
            cross_entropy(z, &Tensor::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn kd_identical_logits_full_weight_is_zero() {
        let tape = Tape::new();
        let z = Tensor::matrix(2, 3, vec![0.2, -1.0, 3.0, 1.0, 1.5, -0.5]);
        let zs = tape.param(z.clone());
        let cfg = KdConfig { lambda: 1.0, tau: 2.0 };
        let loss = kd_loss(zs, &z, &one_hot(&[0, 1], 3), &cfg).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn kd_without_distillation_is_ce_bitwise() {
        let tape = Tape::new();
        let zs = tape.param(Tensor::matrix(2, 3, vec![0.2, -1.0, 3.0, 1.0, 1.5, -0.5]));
        let zt = Tensor::matrix(2, 3, vec![1.0, 0.0, -2.0, 0.5, 0.5, 0.5]);
        let y = one_hot(&[2, 0], 3);
        let kd = kd_loss(zs, &zt, &y, &KdConfig { lambda: 0.0, tau: 4.0 }).unwrap();
        let ce = cross_entropy(zs, &y).unwrap();
        assert_eq!(kd.item().to_bits(), ce.item().to_bits());
    }

    #[test]
    fn kd_shape_and_config_errors() {
        let tape = Tape::new();
        let zs = tape.param(Tensor::zeros(1, 2));
        let y = one_hot(&[0], 2);
        assert!(matches!(
            kd_loss(zs, &Tensor::zeros(1, 3), &y, &KdConfig::default()),
            Err(Error::Dimension { .. })
        ));
        let bad = KdConfig { lambda: 1.2, tau: 2.0 };
        assert!(kd_loss(zs, &Tensor::zeros(1, 2), &y, &bad).is_err());
    }

    #[test]
    fn kd_teacher_receives_no_gradient_path() {
        let tape = Tape::new();
        let zs = tape.param(Tensor::zeros(1, 2));
        let zt = Tensor::matrix(1, 2, vec![0.0, 9f64.ln()]);
        let loss = kd_loss(zs, &zt, &one_hot(&[0], 2), &KdConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        // only the student parameter is a leaf that requires grad
        assert!(tape.grad(zs).is_some());
    }

    #[test]
    fn stats_by_hand() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = device_batch_stats(&x, &[0, 0, 1]).unwrap();
        assert_eq!(s.centroids[&0], vec![1.0, 0.0]);
        assert_eq!(s.centroids[&1], vec![0.0, 2.0]);
        assert!((s.global_centroid[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.global_centroid[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.counts[&0], 2);

        let v = vec![0.3, -0.7];
        let same = Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]).unwrap();
        let s = device_batch_stats(&same, &[5, 5, 5]).unwrap();
        assert_eq!(s.centroids[&5], v);
        assert_eq!(s.global_centroid, v);
        assert!(device_batch_stats(&x, &[]).is_err());
    }

    #[test]
    fn dcsl_by_hand() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 2.0], vec![4.0, 0.0], vec![4.0, 2.0]];
        let dev = [0, 0, 1, 1];
        let eps = 1e-8;
        assert!((eval_dcsl(&x, &dev, eps) - 1.0 / (16.0 + eps)).abs() < 1e-15);

        let tight = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![-3.0, 0.5]];
        assert_eq!(eval_dcsl(&tight, &[0, 0, 1], eps), 0.0);
    }

    #[test]
    fn dcsl_single_device_is_zero_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]));
        let loss = dcsl(x, &[7, 7, 7], 1e-8).unwrap();
        assert_eq!(loss.item(), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gdal_by_hand() {
        let x = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert!((eval_gdal(&x, &[0, 1]) - 1.0).abs() < 1e-15);
        let coincide = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(eval_gdal(&coincide, &[0, 0, 1, 1]).abs() < 1e-15);
    }

    #[test]
    fn empty_batches_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(1, 2));
        assert!(matches!(dcsl(x, &[], 1e-8), Err(Error::Validation(_))));
        assert!(matches!(gdal(x, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn dafa_reduces_to_ce_bitwise() {
        let tape = Tape::new();
        let z = tape.param(Tensor::matrix(3, 2, vec![0.1, 0.4, -1.0, 2.0, 0.3, 0.3]));
        let e = tape.param(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]));
        let y = one_hot(&[0, 1, 1], 2);
        let cfg = DafaConfig {
            lambda_dcsl: 0.0,
            lambda_gdal: 0.0,
            epsilon: 1e-8,
        };
        let full = dafa_teacher_loss(z, e, &y, &[0, 1, 1], &cfg).unwrap();
        let ce = cross_entropy(z, &y).unwrap();
        assert_eq!(full.item().to_bits(), ce.item().to_bits());
    }

    #[test]
    fn dafa_is_sum_of_terms() {
        // fixture embeddings from the dcsl hand computation
        let x = vec![vec![0.0, 0.0], vec![0.0, 2.0], vec![4.0, 0.0], vec![4.0, 2.0]];
        let dev = [0, 0, 1, 1];
        let cfg = DafaConfig::default();
        assert_eq!((cfg.lambda_dcsl, cfg.lambda_gdal), (0.01, 0.01));
        let tape = Tape::new();
        let z = tape.param(Tensor::zeros(4, 2));
        let e = tape.param(Tensor::from_rows(&x).unwrap());
        let y = one_hot(&[0, 1, 0, 1], 2);
        let total = dafa_teacher_loss(z, e, &y, &dev, &cfg).unwrap().item();
        // ce = ln 2, dcsl = 1/(16+eps), gdal: centroids (0,1),(4,1) vs (2,1) => 4
        let expected = 2f64.ln() + 0.01 / (16.0 + 1e-8) + 0.01 * 4.0;
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn dafa_rejects_inconsistent_batch() {
        let tape = Tape::new();
        let z = tape.param(Tensor::zeros(3, 2));
        let e = tape.param(Tensor::zeros(2, 2));
        let y = one_hot(&[0, 1, 0], 2);
        assert!(dafa_teacher_loss(z, e, &y, &[0, 1, 1], &DafaConfig::default()).is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..=6, 1usize..=3).prop_flat_map(|(n, e)| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, e), n),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn alignment_losses_match_brute_force((x, dev) in batch_strategy()) {
            let eps = 1e-8;
            let a = eval_dcsl(&x, &dev, eps);
            let b = brute_dcsl(&x, &dev, eps);
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            let g = eval_gdal(&x, &dev);
            prop_assert!((g - brute_gdal(&x, &dev)).abs() <= 1e-10);
        }

        #[test]
        fn alignment_losses_permutation_and_relabel_invariant((x, dev) in batch_strategy(), shift in -3.0f64..3.0) {
            let n = x.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
            let dp: Vec<usize> = perm.iter().map(|&i| dev[i]).collect();
            let relabel: Vec<usize> = dev.iter().map(|d| 10 - d).collect();
            let base_d = eval_dcsl(&x, &dev, 1e-8);
            let base_g = eval_gdal(&x, &dev);
            let tol = |v: f64| 1e-9 * v.abs().max(1.0);
            prop_assert!((eval_dcsl(&xp, &dp, 1e-8) - base_d).abs() <= tol(base_d));
            prop_assert!((eval_gdal(&xp, &dp) - base_g).abs() <= tol(base_g));
            prop_assert!((eval_dcsl(&x, &relabel, 1e-8) - base_d).abs() <= tol(base_d));
            prop_assert!((eval_gdal(&x, &relabel) - base_g).abs() <= tol(base_g));
            let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            prop_assert!((eval_gdal(&shifted, &dev) - base_g).abs() <= 1e-9);
        }

        #[test]
        fn stats_are_bitwise_permutation_invariant((x, dev) in batch_strategy()) {
            let t = Tensor::from_rows(&x).unwrap();
            let s = device_batch_stats(&t, &dev).unwrap();
            let n = x.len();
            let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 1) % n).collect();
            if perm.iter().collect::<BTreeSet<_>>().len() == n {
                let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
                let dp: Vec<usize> = perm.iter().map(|&i| dev[i]).collect();
                let sp = device_batch_stats(&Tensor::from_rows(&xp).unwrap(), &dp).unwrap();
                prop_assert_eq!(&s, &sp);
            }
            // global centroid equals the count-weighted mean of device centroids
            for j in 0..x[0].len() {
                let w: f64 = s.centroids.iter().map(|(d, c)| c[j] * s.counts[d] as f64).sum::<f64>() / n as f64;
                prop_assert!((w - s.global_centroid[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn kd_loss_is_nonnegative(
            zs in prop::collection::vec(-4.0f64..4.0, 6),
            zt in prop::collection::vec(-4.0f64..4.0, 6),
            lambda in 0.0f64..=1.0,
            tau in 0.5f64..5.0,
        ) {
            let tape = Tape::new();
            let s = tape.param(Tensor::matrix(2, 3, zs));
            let t = Tensor::matrix(2, 3, zt);
            let y = one_hot(&[1, 2], 3);
            let l = kd_loss(s, &t, &y, &KdConfig { lambda, tau }).unwrap().item();
            prop_assert!(l >= -1e-15);
        }
    }
}
