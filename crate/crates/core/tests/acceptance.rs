//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use dafa_core::augment::{bin_statistics, freq_mixstyle_with, mixup, mixup_with, MixupConfig};
use dafa_core::config::ExperimentConfig;
use dafa_core::data::{stream, DatasetSplit, LabeledBatch, Samples};
use dafa_core::eval::{evaluate, EvalReport};
use dafa_core::experiment::{generate_dataset, run, stage_train_config, RunOptions};
use dafa_core::gradcheck::{run_suite, Mutation, TOLERANCE};
use dafa_core::losses::{cross_entropy, dafa_teacher_loss, dcsl, gdal, kd_loss, DafaConfig, KdConfig};
use dafa_core::model::{enforce_budget, ComplexityBudget, Mlp};
use dafa_core::pipeline::{
    alignment_metrics, distill_student, init_model, ModelBundle, TeacherEnsemble, TeacherMode,
};
use dafa_core::{Error, Tape, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn one_hot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows {
        t.data_mut()[i * cols + rng.random_range(0..cols)] = 1.0;
    }
    t
}

// 1
fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let report = run_suite(17, Mutation::None).expect("suite runs");
    let elapsed = start.elapsed();
    let kd = report.checks.iter().filter(|c| c.name.starts_with("kd_loss")).count();
    let worst = report.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let covered = ["cross_entropy", "dcsl", "gdal", "dafa_teacher_loss"]
        .iter()
        .all(|n| report.checks.iter().any(|c| c.name.starts_with(n)));
    let passed = report.passed() && kd == 12 && covered && worst < TOLERANCE && elapsed < Duration::from_secs(30);
    outcome(
        passed,
        format!(
            "{} checks ({kd} kd), worst rel err {worst:.2e} < {TOLERANCE:.0e}, {:.1}s < 30s",
            report.checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_centroids(x: &[Vec<f64>], ids: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (row, &d) in x.iter().zip(ids) {
        groups.entry(d).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(d, rows)| {
            let mut c = vec![0.0; rows[0].len()];
            for r in &rows {
                for (ci, v) in c.iter_mut().zip(r.iter()) {
                    *ci += v;
                }
            }
            (d, c.into_iter().map(|v| v / rows.len() as f64).collect())
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn brute_dcsl(x: &[Vec<f64>], ids: &[usize], eps: f64) -> f64 {
    let c = brute_centroids(x, ids);
    if c.len() < 2 {
        return 0.0;
    }
    let sw = x.iter().zip(ids).map(|(r, d)| sq(r, &c[d])).sum::<f64>() / x.len() as f64;
    let keys: Vec<usize> = c.keys().copied().collect();
    let mut sb = 0.0;
    let mut pairs = 0;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            sb += sq(&c[&keys[i]], &c[&keys[j]]);
            pairs += 1;
        }
    }
    sw / (sb / pairs as f64 + eps)
}

fn brute_gdal(x: &[Vec<f64>], ids: &[usize]) -> f64 {
    let c = brute_centroids(x, ids);
    let dim = x[0].len();
    let g: Vec<f64> = (0..dim).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / x.len() as f64).collect();
    c.values().map(|m| sq(m, &g)).sum::<f64>() / c.len() as f64
}

// 2
fn brute_force_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(2, 0);
    let mut worst: f64 = 0.0;
    let mut special = 0;
    for b in 0..200 {
        let n = rng.random_range(2..=24);
        let e = rng.random_range(1..=6);
        let (rows, ids): (Vec<Vec<f64>>, Vec<usize>) = match b % 10 {
            // one device only
            0 => (
                (0..n).map(|_| (0..e).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
                vec![3; n],
            ),
            // every device centred on the same point
            1 => {
                let centre: Vec<f64> = (0..e).map(|_| rng.random_range(-4..=4) as f64).collect();
                let mut rows = Vec::new();
                let mut ids = Vec::new();
                for d in 0..3 {
                    let v: Vec<f64> = (0..e).map(|_| rng.random_range(-4..=4) as f64 / 2.0).collect();
                    rows.push(centre.iter().zip(&v).map(|(c, v)| c + v).collect());
                    rows.push(centre.iter().zip(&v).map(|(c, v)| c - v).collect());
                    ids.extend([d, d]);
                }
                (rows, ids)
            }
            _ => {
                let devices = rng.random_range(2..=5);
                let mut ids: Vec<usize> = (0..n).map(|i| i % devices).collect();
                ids.shuffle(&mut rng);
                (
                    (0..n).map(|_| (0..e).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
                    ids,
                )
            }
        };
        if b % 10 < 2 {
            special += 1;
        }
        let n = rows.len();
        let t = Tensor::matrix(n, e, rows.concat());
        let tape = Tape::new();
        let x = tape.constant(t);
        let got_dcsl = dcsl(x, &ids, 1e-8).expect("dcsl").item();
        let got_gdal = gdal(x, &ids).expect("gdal").item();
        let want_dcsl = brute_dcsl(&rows, &ids, 1e-8);
        let want_gdal = brute_gdal(&rows, &ids);
        // the equal-centroid case divides by eps, so compare relative to magnitude
        worst = worst
            .max((got_dcsl - want_dcsl).abs() / want_dcsl.abs().max(1.0))
            .max((got_gdal - want_gdal).abs() / want_gdal.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "200 batches ({special} single-device or equal-centroid), worst error {worst:.2e} <= 1e-10, {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    )
}

// 3
fn reduction_identities() -> Outcome {
    let mut rng = stream(3, 0);
    let mut ok = true;
    let mut worst_kl: f64 = 0.0;
    for _ in 0..50 {
        let (n, c, e) = (rng.random_range(1..=8), rng.random_range(2..=6), rng.random_range(1..=4));
        let zs = random_matrix(&mut rng, n, c, 3.0);
        let zt = random_matrix(&mut rng, n, c, 3.0);
        let y = one_hot(&mut rng, n, c);
        let emb = random_matrix(&mut rng, n, e, 2.0);
        let ids: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let tau = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let tape = Tape::new();
        let s = tape.param(zs.clone());
        let ce = cross_entropy(s, &y).unwrap().item();
        let kd0 = kd_loss(s, &zt, &y, &KdConfig { lambda: 0.0, tau }).unwrap().item();
        let same = kd_loss(s, &zs, &y, &KdConfig { lambda: 1.0, tau }).unwrap().item();
        let dafa0 = DafaConfig {
            lambda_dcsl: 0.0,
            lambda_gdal: 0.0,
            ..DafaConfig::default()
        };
        let x = tape.param(emb);
        let d0 = dafa_teacher_loss(s, x, &y, &ids, &dafa0).unwrap().item();
        ok &= kd0.to_bits() == ce.to_bits() && d0.to_bits() == ce.to_bits() && same.abs() <= 1e-12;
        worst_kl = worst_kl.max(same.abs());
    }
    outcome(
        ok,
        format!("50 cases: kd(lambda=0) and dafa(0,0) bitwise equal to CE, |kd(z,z,lambda=1)| <= {worst_kl:.1e}"),
    )
}

// 4
fn kd_fixture() -> Outcome {
    let tape = Tape::new();
    let zs = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]));
    let zt = Tensor::matrix(1, 2, vec![0.0, 9f64.ln()]);
    let y = Tensor::matrix(1, 2, vec![1.0, 0.0]);
    let got = kd_loss(zs, &zt, &y, &KdConfig { lambda: 0.98, tau: 2.0 }).unwrap().item();
    // student soft = [1/2, 1/2], teacher soft = [1/4, 3/4]
    let kl = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let want = 0.02 * 2f64.ln() + 0.98 * 4.0 * kl;
    let err = (got - want).abs();
    outcome(err <= 1e-12, format!("{got:.15} vs {want:.15}, error {err:.1e} <= 1e-12"))
}

// 5
fn budget() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let budget = ComplexityBudget::default();
    let limits = budget.max_param_bytes == 128 * 1024 && budget.bytes_per_param == 4 && budget.max_macs == 30_000_000;
    let report = enforce_budget(&cfg.student, &budget);
    let mut wide = cfg.student.clone();
    wide.hidden_dims = vec![4096];
    let params_line = match enforce_budget(&wide, &budget).violations().as_slice() {
        [only] => only.starts_with("parameters:"),
        _ => false,
    };
    let mut deep = cfg.clone();
    deep.student.hidden_dims = vec![24; 1];
    deep.budget.max_macs = 100;
    let macs_line = matches!(deep.validate(), Err(Error::Budget(m)) if m.contains("MACs:") && !m.contains("parameters:"));
    outcome(
        limits && report.passed && params_line && macs_line,
        format!(
            "default student {} params = {} B of {} B, {} of {} MACs; oversize rejected on the violated line",
            report.params, report.param_bytes, report.max_param_bytes, report.macs, report.max_macs
        ),
    )
}

// 10
fn augmentation_invariants() -> Outcome {
    let mut rng = stream(10, 0);
    let mut row_err: f64 = 0.0;
    let mut stat_err: f64 = 0.0;
    let mut identity = true;
    for _ in 0..50 {
        let (n, f, t, c) = (rng.random_range(2..=10), rng.random_range(1..=5), rng.random_range(2..=8), 4);
        let mut targets = Tensor::zeros(n, c);
        for i in 0..n {
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            targets.data_mut()[i * c..(i + 1) * c].copy_from_slice(&w.iter().map(|v| v / s).collect::<Vec<_>>());
        }
        let batch = LabeledBatch::new(
            random_matrix(&mut rng, n, f * t, 3.0),
            targets,
            (0..n).map(|i| i % 3).collect(),
            f,
        )
        .unwrap();
        let mixed = mixup(
            batch.clone(),
            &MixupConfig {
                alpha: 0.3,
                apply_probability: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        for i in 0..n {
            row_err = row_err.max((mixed.targets.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let styled = freq_mixstyle_with(&batch, 0.0, &perm).unwrap();
        let (m0, s0) = bin_statistics(&batch);
        let (m1, s1) = bin_statistics(&styled);
        for (i, &j) in perm.iter().enumerate() {
            for k in 0..f {
                stat_err = stat_err
                    .max((m1[i * f + k] - m0[j * f + k]).abs())
                    .max((s1[i * f + k] - s0[j * f + k]).abs());
            }
        }
        identity &= mixup_with(&batch, 1.0, &perm).unwrap() == batch;
        identity &= freq_mixstyle_with(&batch, 1.0, &perm).unwrap() == batch;
    }
    outcome(
        row_err <= 1e-12 && stat_err <= 1e-9 && identity,
        format!("target rows sum to 1 within {row_err:.1e}, partner statistics within {stat_err:.1e}, identity at 1: {identity}"),
    )
}

fn seen_validation(data: &DatasetSplit) -> Samples {
    let mut out = Samples::new(data.feature_dim());
    for i in 0..data.validation.len() {
        if data.roster[data.validation.devices[i]].seen {
            out.push(data.validation.feature_row(i), data.validation.labels[i], data.validation.devices[i]);
        }
    }
    out
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct SeedResult {
    ensemble_unseen: f64,
    ce_unseen: f64,
    dsft_seen_ok: bool,
    seen_before: f64,
    seen_after: f64,
    unseen_identical: bool,
    ratio: (f64, f64),
    spread: (f64, f64),
    init_log_loss: f64,
    distill_time: Duration,
    dsft_time: Duration,
}

fn seed_result(seed: u64, root: &Path) -> (SeedResult, ExperimentConfig) {
    let mut cfg = ExperimentConfig::desk();
    cfg.experiment.seed = seed;
    cfg.experiment.out_dir = root.join(format!("seed{seed}"));
    let start = Instant::now();
    let summary = run(&cfg, RunOptions { skip_dsft: true, force: true }).expect("run");
    let ensemble_unseen = summary.before.aggregates.unseen.expect("unseen devices").accuracy;
    let data = generate_dataset(&cfg).unwrap();

    let ce_teacher = Mlp::load(cfg.experiment.out_dir.join("teachers/teacher_0_ce.ckpt")).unwrap();
    let dcfg = stage_train_config(seed, &cfg.train_distill, "distill");
    let ce_only = distill_student(
        &data,
        &cfg.student,
        &TeacherEnsemble::new(vec![ce_teacher]).unwrap(),
        &cfg.kd,
        &dcfg,
        &cfg.augmentation,
        &cfg.budget,
    )
    .unwrap()
    .model;
    let ce_bundle = ModelBundle::new(ce_only, BTreeMap::new(), &cfg.budget).unwrap();
    let ce_unseen = evaluate(&ce_bundle, &data, true).unwrap().aggregates.unseen.unwrap().accuracy;
    let distill_time = start.elapsed();

    let start = Instant::now();
    let summary = run(&cfg, RunOptions::default()).expect("run with fine-tuning");
    let dsft_time = start.elapsed();
    assert_eq!(summary.computed, ["dsft"], "only fine-tuning reruns");
    let (before, after): (&EvalReport, &EvalReport) = (&summary.before, &summary.after);
    let mut dsft_seen_ok = true;
    let mut unseen_identical = true;
    for (b, a) in before.per_device.iter().zip(&after.per_device) {
        if a.seen {
            dsft_seen_ok &= a.metrics.accuracy >= b.metrics.accuracy - 0.5;
        } else {
            unseen_identical &= a.metrics.accuracy.to_bits() == b.metrics.accuracy.to_bits()
                && a.metrics.log_loss.to_bits() == b.metrics.log_loss.to_bits();
        }
    }
    let seen_before = before.aggregates.seen.unwrap().accuracy;
    let seen_after = after.aggregates.seen.unwrap().accuracy;

    let held_out = seen_validation(&data);
    let dafa_stage = cfg
        .ensemble
        .members
        .iter()
        .position(|m| *m == TeacherMode::Dafa)
        .expect("an alignment teacher");
    let stage = format!("teacher_{dafa_stage}_dafa");
    let tcfg = stage_train_config(seed, &cfg.train_teacher, &stage);
    let init = alignment_metrics(&init_model(&cfg.teacher, &tcfg).unwrap(), &held_out, cfg.dafa.epsilon).unwrap();
    let trained = Mlp::load(cfg.experiment.out_dir.join(format!("teachers/{stage}.ckpt"))).unwrap();
    let trained = alignment_metrics(&trained, &held_out, cfg.dafa.epsilon).unwrap();

    let fresh = init_model(&cfg.student, &dcfg).unwrap();
    let fresh = ModelBundle::new(fresh, BTreeMap::new(), &cfg.budget).unwrap();
    let init_log_loss = evaluate(&fresh, &data, true).unwrap().aggregates.overall.log_loss;

    (
        SeedResult {
            ensemble_unseen,
            ce_unseen,
            dsft_seen_ok,
            seen_before,
            seen_after,
            unseen_identical,
            ratio: (init.scatter_ratio, trained.scatter_ratio),
            spread: (init.centroid_spread, trained.centroid_spread),
            init_log_loss,
            distill_time,
            dsft_time,
        },
        cfg,
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient checks", gradient_checks()),
        ("2 dcsl/gdal brute-force oracles", brute_force_oracles()),
        ("3 reduction identities", reduction_identities()),
        ("4 distillation scalar fixture", kd_fixture()),
        ("5 complexity budget", budget()),
    ];

    let tmp = tempfile::TempDir::new().unwrap();
    let mut per_seed = Vec::new();
    let mut first_cfg = None;
    for seed in SEEDS {
        let (r, cfg) = seed_result(seed, tmp.path());
        println!(
            "  seed {seed}: unseen {:.2} (ensemble) vs {:.2} (ce only); seen {:.2} -> {:.2} after fine-tuning; \
             ratio {:.3} -> {:.3}, spread {:.4} -> {:.4}; fresh log-loss {:.4}",
            r.ensemble_unseen,
            r.ce_unseen,
            r.seen_before,
            r.seen_after,
            r.ratio.0,
            r.ratio.1,
            r.spread.0,
            r.spread.1,
            r.init_log_loss
        );
        first_cfg.get_or_insert(cfg);
        per_seed.push(r);
    }
    let k = per_seed.len() as f64;

    let wins = per_seed.iter().filter(|r| r.ensemble_unseen > r.ce_unseen).count();
    let mean_ens = per_seed.iter().map(|r| r.ensemble_unseen).sum::<f64>() / k;
    let mean_ce = per_seed.iter().map(|r| r.ce_unseen).sum::<f64>() / k;
    let distill_time: Duration = per_seed.iter().map(|r| r.distill_time).sum();
    results.push((
        "6 two-teacher ensemble on unseen devices",
        outcome(
            mean_ens >= mean_ce && wins >= 3 && distill_time < Duration::from_secs(600),
            format!(
                "mean unseen {mean_ens:.2} vs {mean_ce:.2}, wins {wins}/{}, {:.0}s < 600s",
                per_seed.len(),
                distill_time.as_secs_f64()
            ),
        ),
    ));

    let seen_ok = per_seed.iter().all(|r| r.dsft_seen_ok);
    let mean_before = per_seed.iter().map(|r| r.seen_before).sum::<f64>() / k;
    let mean_after = per_seed.iter().map(|r| r.seen_after).sum::<f64>() / k;
    let identical = per_seed.iter().all(|r| r.unseen_identical);
    let dsft_time: Duration = per_seed.iter().map(|r| r.dsft_time).sum();
    results.push((
        "7 device-specific fine-tuning",
        outcome(
            seen_ok && mean_after > mean_before && identical && dsft_time < Duration::from_secs(300),
            format!(
                "every seen device >= base - 0.5pt: {seen_ok}; seen mean {mean_before:.2} -> {mean_after:.2}; \
                 unseen rows bit-identical: {identical}; {:.0}s < 300s",
                dsft_time.as_secs_f64()
            ),
        ),
    ));

    let ratio_down = per_seed.iter().all(|r| r.ratio.1 < r.ratio.0);
    let spread_ok = per_seed.iter().all(|r| r.spread.1 <= 1.1 * r.spread.0);
    let worst_growth = per_seed.iter().map(|r| r.spread.1 / r.spread.0).fold(0.0, f64::max);
    results.push((
        "8 alignment teacher embedding structure",
        outcome(
            ratio_down && spread_ok,
            format!("scatter ratio below init on every seed: {ratio_down}; worst spread growth x{worst_growth:.3} <= x1.1"),
        ),
    ));

    let cfg = first_cfg.expect("at least one seed");
    let before = snapshot(&cfg.experiment.out_dir);
    run(&cfg, RunOptions { skip_dsft: false, force: true }).expect("rerun");
    let after = snapshot(&cfg.experiment.out_dir);
    let differing: Vec<&String> = before
        .keys()
        .chain(after.keys())
        .filter(|f| before.get(*f) != after.get(*f))
        .collect();
    results.push((
        "9 reproducible runs",
        outcome(
            differing.is_empty(),
            format!("{} files byte-identical after a forced rerun; differing: {differing:?}", before.len()),
        ),
    ));

    results.push(("10 augmentation invariants", augmentation_invariants()));

    let ln10 = 10f64.ln();
    let worst = per_seed
        .iter()
        .map(|r| (r.init_log_loss - ln10).abs())
        .fold(0.0, f64::max);
    results.push((
        "11 fresh model at chance",
        outcome(worst <= 0.05, format!("max |log-loss - ln 10| = {worst:.4} <= 0.05 over {} seeds", per_seed.len())),
    ));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
