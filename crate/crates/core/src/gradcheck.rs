//! Central finite-difference checks of every loss and layer.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::data::stream;
use crate::error::Result;
use crate::losses::{cross_entropy, dafa_teacher_loss, dcsl, gdal, kd_loss, DafaConfig, KdConfig};
use crate::model::{Activation, Mlp, NetworkSpec};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{softmax_rows, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Deliberate defect injected into the analytic gradient, used to show the
/// checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    FlipSign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<GradCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:w$}  rel err {:.3e}", c.name, c.rel_error)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar `f` with respect to every input
/// against central differences and returns the relative error over the
/// concatenated gradient.
pub fn check<F>(f: F, inputs: &[Tensor], mutation: Mutation) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
    }
    if mutation == Mutation::FlipSign {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Row-stochastic targets: one-hot or soft.
fn targets<R: Rng>(rng: &mut R, rows: usize, cols: usize, soft: bool) -> Tensor {
    if soft {
        softmax_rows(&uniform(rng, rows, cols, -2.0, 2.0), 1.0).expect("finite")
    } else {
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let k = rng.random_range(0..cols);
            t.data_mut()[i * cols + k] = 1.0;
        }
        t
    }
}

/// Device ids over `n` rows that use at least two devices.
fn device_ids<R: Rng>(rng: &mut R, n: usize, max_devices: usize) -> Vec<usize> {
    loop {
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..max_devices)).collect();
        if ids.iter().any(|&d| d != ids[0]) {
            return ids;
        }
    }
}

/// Every loss, the KD grid of temperatures and weights, and the network
/// layers, on random inputs in [-2, 2].
pub fn run_suite(seed: u64, mutation: Mutation) -> Result<GradcheckReport> {
    let mut rng = stream(seed, 17);
    let mut checks = Vec::new();
    let mut push = |name: String, rel_error: f64| {
        checks.push(GradCheck {
            passed: rel_error < TOLERANCE,
            name,
            rel_error,
        })
    };
    let (n, c, e) = (6, 5, 4);

    let logits = uniform(&mut rng, n, c, -2.0, 2.0);
    let y = targets(&mut rng, n, c, false);
    push(
        "cross_entropy".into(),
        check(|_, v| cross_entropy(v[0], &y), std::slice::from_ref(&logits), mutation)?,
    );
    let soft = targets(&mut rng, n, c, true);
    push(
        "cross_entropy (soft targets)".into(),
        check(|_, v| cross_entropy(v[0], &soft), std::slice::from_ref(&logits), mutation)?,
    );

    for tau in [1.0, 2.0, 4.0] {
        for lambda in [0.0, 0.5, 0.98, 1.0] {
            let student = uniform(&mut rng, n, c, -2.0, 2.0);
            let teacher = uniform(&mut rng, n, c, -2.0, 2.0);
            let kd = KdConfig { lambda, tau };
            push(
                format!("kd_loss tau={tau} lambda={lambda}"),
                check(|_, v| kd_loss(v[0], &teacher, &y, &kd), &[student], mutation)?,
            );
        }
    }

    for (n, e, devices) in [(8, 4, 3), (5, 3, 2), (8, 2, 4)] {
        let emb = uniform(&mut rng, n, e, -2.0, 2.0);
        let ids = device_ids(&mut rng, n, devices);
        push(
            format!("dcsl n={n} e={e}"),
            check(|_, v| dcsl(v[0], &ids, 1e-8), std::slice::from_ref(&emb), mutation)?,
        );
        push(
            format!("gdal n={n} e={e}"),
            check(|_, v| gdal(v[0], &ids), &[emb], mutation)?,
        );
    }

    let emb = uniform(&mut rng, n, e, -2.0, 2.0);
    let ids = device_ids(&mut rng, n, 3);
    for (name, cfg) in [
        ("dafa_teacher_loss", DafaConfig::default()),
        (
            "dafa_teacher_loss (unit weights)",
            DafaConfig {
                lambda_dcsl: 1.0,
                lambda_gdal: 1.0,
                ..DafaConfig::default()
            },
        ),
    ] {
        push(
            name.into(),
            check(
                |_, v| dafa_teacher_loss(v[0], v[1], &y, &ids, &cfg),
                &[logits.clone(), emb.clone()],
                mutation,
            )?,
        );
    }

    // layers
    let x = uniform(&mut rng, n, 4, -2.0, 2.0);
    let w = uniform(&mut rng, 4, 3, -2.0, 2.0);
    let b = uniform(&mut rng, 1, 3, -2.0, 2.0);
    let probe = uniform(&mut rng, n, 3, -2.0, 2.0);
    push(
        "linear".into(),
        check(
            |t, v| v[0].matmul(v[1])?.add_row(v[2])?.mul(t.constant(probe.clone())).map(|p| p.sum()),
            &[x.clone(), w.clone(), b.clone()],
            mutation,
        )?,
    );
    // shift away from the kink so the difference quotient is smooth
    let away: Vec<f64> = x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect();
    let x_away = Tensor::matrix(n, 4, away);
    let probe4 = uniform(&mut rng, n, 4, -2.0, 2.0);
    push(
        "relu".into(),
        check(
            |t, v| v[0].relu().mul(t.constant(probe4.clone())).map(|p| p.sum()),
            &[x_away],
            mutation,
        )?,
    );
    let pos = uniform(&mut rng, n, 3, 0.5, 2.0);
    push(
        "log_softmax / softmax / log / exp".into(),
        check(
            |_, v| {
                let a = v[0].log_softmax(2.0)?.sum_axis(Axis::Cols).sum();
                let b = v[0].softmax(0.5)?.square().sum();
                let c = v[1].log()?.mean();
                let d = v[1].exp().scale(0.1).sum_axis(Axis::Rows).sum();
                a.add(b)?.add(c)?.add(d)
            },
            &[probe.clone(), pos],
            mutation,
        )?,
    );

    let spec = NetworkSpec {
        input_dim: 4,
        hidden_dims: vec![5],
        embedding_dim: 3,
        num_classes: c,
        activation: Activation::Relu,
    };
    let model = Mlp::init(&spec, &mut rng)?;
    let params: Vec<Tensor> = model.params().cloned().collect();
    let ids = device_ids(&mut rng, n, 3);
    push(
        "network forward + dafa_teacher_loss".into(),
        check(
            |t, v| {
                let fwd = forward_with(model.layers().len(), t, &x, v)?;
                dafa_teacher_loss(
                    fwd.1,
                    fwd.0,
                    &y,
                    &ids,
                    &DafaConfig {
                        lambda_dcsl: 0.5,
                        lambda_gdal: 0.5,
                        ..DafaConfig::default()
                    },
                )
            },
            &params,
            mutation,
        )?,
    );

    Ok(GradcheckReport { checks })
}

/// Forward pass of a `layers`-deep network whose weights are `params`.
fn forward_with<'t>(layers: usize, tape: &'t Tape, x: &Tensor, params: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    let mut h = tape.constant(x.clone());
    let mut embedding = h;
    for (i, wb) in params.chunks(2).enumerate() {
        h = h.matmul(wb[0])?.add_row(wb[1])?;
        if i + 1 < layers {
            h = h.relu();
            embedding = h;
        }
    }
    Ok((embedding, h))
}
