//! Fully connected classifiers with an exposed embedding layer, exact
//! complexity accounting, and a flat binary checkpoint format.
//!
//! Layout: `input -> hidden_dims... -> embedding_dim -> num_classes`, ReLU
//! after every layer except the classifier head. The embedding is the
//! activation feeding the head.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_kernel, Tensor};

const MAGIC: &[u8; 4] = b"DAFM";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Validation(format!("all layer widths must be >= 1: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("a classifier needs at least two classes".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain([self.embedding_dim, self.num_classes])
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Parameter and per-inference multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: u64,
    pub macs: u64,
}

pub fn count_complexity(spec: &NetworkSpec) -> Complexity {
    spec.layer_dims()
        .iter()
        .fold(Complexity { params: 0, macs: 0 }, |acc, &(i, o)| Complexity {
            params: acc.params + (i * o + o) as u64,
            macs: acc.macs + (i * o) as u64,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityBudget {
    pub max_param_bytes: u64,
    pub bytes_per_param: u64,
    pub max_macs: u64,
}

impl Default for ComplexityBudget {
    /// 128 KiB of parameters at 4 bytes each, 30 million MACs.
    fn default() -> Self {
        Self {
            max_param_bytes: 128 * 1024,
            bytes_per_param: 4,
            max_macs: 30_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub params: u64,
    pub param_bytes: u64,
    pub max_param_bytes: u64,
    pub macs: u64,
    pub max_macs: u64,
    pub passed: bool,
}

impl BudgetReport {
    pub fn param_margin(&self) -> i64 {
        self.max_param_bytes as i64 - self.param_bytes as i64
    }

    pub fn mac_margin(&self) -> i64 {
        self.max_macs as i64 - self.macs as i64
    }

    pub fn params_ok(&self) -> bool {
        self.param_bytes <= self.max_param_bytes
    }

    pub fn macs_ok(&self) -> bool {
        self.macs <= self.max_macs
    }

    /// Lines of the report that are over budget.
    pub fn violations(&self) -> Vec<String> {
        let lines = self.lines();
        [(self.params_ok(), &lines[0]), (self.macs_ok(), &lines[1])]
            .into_iter()
            .filter(|(ok, _)| !ok)
            .map(|(_, l)| l.clone())
            .collect()
    }

    fn lines(&self) -> [String; 2] {
        [
            format!(
                "parameters: {} ({} bytes) of {} bytes, margin {} bytes",
                self.params,
                self.param_bytes,
                self.max_param_bytes,
                self.param_margin()
            ),
            format!(
                "MACs: {} of {}, margin {}",
                self.macs,
                self.max_macs,
                self.mac_margin()
            ),
        ]
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [p, m] = self.lines();
        writeln!(f, "{} {p}", if self.params_ok() { "ok  " } else { "FAIL" })?;
        writeln!(f, "{} {m}", if self.macs_ok() { "ok  " } else { "FAIL" })?;
        write!(f, "budget {}", if self.passed { "passed" } else { "exceeded" })
    }
}

/// Checks `spec` against `budget`. Failing is a value, not an error.
pub fn enforce_budget(spec: &NetworkSpec, budget: &ComplexityBudget) -> BudgetReport {
    let c = count_complexity(spec);
    let param_bytes = c.params * budget.bytes_per_param;
    BudgetReport {
        params: c.params,
        param_bytes,
        max_param_bytes: budget.max_param_bytes,
        macs: c.macs,
        max_macs: budget.max_macs,
        passed: param_bytes <= budget.max_param_bytes && c.macs <= budget.max_macs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `1 x fan_out`
    pub bias: Tensor,
}

/// Embedding and logits for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub embedding: Tensor,
    pub logits: Tensor,
}

/// Tape handles produced by [`Mlp::forward_tape`].
#[derive(Debug)]
pub struct TapeForward<'t> {
    pub embedding: Var<'t>,
    pub logits: Var<'t>,
    /// `[w0, b0, w1, b1, ...]` in layer order.
    pub params: Vec<Var<'t>>,
}

/// Default factor on the classifier's Glorot range at initialization.
pub const DEFAULT_HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. The classifier range is scaled
    /// by [`DEFAULT_HEAD_INIT_SCALE`] so a fresh model predicts close to
    /// uniform.
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        Self::init_scaled(spec, DEFAULT_HEAD_INIT_SCALE, rng)
    }

    /// As [`init`](Self::init) with an explicit classifier range factor.
    pub fn init_scaled<R: Rng>(spec: &NetworkSpec, head_scale: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if !(head_scale >= 0.0 && head_scale.is_finite()) {
            return Err(Error::Parameter(format!("head init scale must be finite and >= 0, got {head_scale}")));
        }
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| {
                let mut limit = (6.0 / (i + o) as f64).sqrt();
                if k == last {
                    limit *= head_scale;
                }
                let w = (0..i * o).map(|_| rng.random_range(-limit..=limit)).collect();
                Linear {
                    weight: Tensor::matrix(i, o, w),
                    bias: Tensor::zeros(1, o),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Builds a model from a flat parameter vector in checkpoint order.
    pub fn from_flat(spec: &NetworkSpec, values: &[f64]) -> Result<Self> {
        spec.validate()?;
        let expected = count_complexity(spec).params as usize;
        if values.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} parameters, got {}",
                values.len()
            )));
        }
        let mut rest = values;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let (w, r) = rest.split_at(i * o);
                let (b, r) = r.split_at(o);
                rest = r;
                Linear {
                    weight: Tensor::matrix(i, o, w.to_vec()),
                    bias: Tensor::matrix(1, o, b.to_vec()),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.spec.input_dim {
            return Err(Error::dim("forward", &[width], &[self.spec.input_dim]));
        }
        Ok(())
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, features: &Tensor) -> Result<ForwardResult> {
        self.check_width(features.cols())?;
        let n = features.rows();
        let mut x = features.data().to_vec();
        let mut embedding = None;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.weight.rows(), layer.weight.cols());
            let mut y = matmul_kernel(&x, layer.weight.data(), n, k, m);
            for row in y.chunks_mut(m) {
                row.iter_mut().zip(layer.bias.data()).for_each(|(v, b)| *v += b);
            }
            if li < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if li + 1 == last {
                embedding = Some(Tensor::matrix(n, m, y.clone()));
            }
            x = y;
        }
        Ok(ForwardResult {
            embedding: embedding.expect("at least two layers"),
            logits: Tensor::matrix(n, self.spec.num_classes, x),
        })
    }

    /// Forward pass recorded on `tape` with every parameter as a leaf.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, features: &Tensor) -> Result<TapeForward<'t>> {
        self.check_width(features.cols())?;
        let mut x = tape.constant(features.clone());
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut embedding = None;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            params.extend([w, b]);
            let mut y = x.matmul(w)?.add_row(b)?;
            if li < last {
                y = y.relu();
            }
            if li + 1 == last {
                embedding = Some(y);
            }
            x = y;
        }
        Ok(TapeForward {
            embedding: embedding.expect("at least two layers"),
            logits: x,
            params,
        })
    }

    /// Adds the gradients held on `tape` into the parameter buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, forward: &TapeForward<'_>) -> Result<()> {
        for (p, v) in self.params_mut().zip(&forward.params) {
            let g = tape
                .grad(*v)
                .ok_or_else(|| Error::Contract("parameter missing from backward pass".into()))?;
            p.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let s = &self.spec;
        let mut header = vec![s.input_dim, s.hidden_dims.len()];
        header.extend(&s.hidden_dims);
        header.extend([s.embedding_dim, s.num_classes, 0]);
        for v in header {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        let u32_at = |pos: usize| -> Result<usize> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| fail(pos, "truncated header"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(fail(0, "bad magic, expected \"DAFM\""));
        }
        let version = bytes
            .get(4..6)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| fail(4, "truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(fail(4, &format!("unsupported version {version}")));
        }
        let mut pos = 6;
        let mut next = || -> Result<usize> {
            let v = u32_at(pos)?;
            pos += 4;
            Ok(v)
        };
        let input_dim = next()?;
        let n_hidden = next()?;
        if n_hidden > 1024 {
            return Err(fail(10, "implausible hidden layer count"));
        }
        let hidden_dims = (0..n_hidden).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let embedding_dim = next()?;
        let num_classes = next()?;
        let activation = next()?;
        if activation != 0 {
            return Err(fail(pos - 4, "unknown activation code"));
        }
        let spec = NetworkSpec {
            input_dim,
            hidden_dims,
            embedding_dim,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate().map_err(|e| fail(6, &e.to_string()))?;
        let n = count_complexity(&spec).params as usize;
        let body = &bytes[pos..];
        if body.len() != n * 8 {
            return Err(fail(
                pos + body.len().min(n * 8),
                &format!("expected {} parameter bytes, found {}", n * 8, body.len()),
            ));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Mlp::from_flat(&spec, &values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Mlp::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint image.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream;

    fn spec(input: usize, hidden: &[usize], emb: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: input,
            hidden_dims: hidden.to_vec(),
            embedding_dim: emb,
            num_classes: classes,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn counts_by_hand() {
        // 10 -> 5 embedding, 5 -> 3 head
        let c = count_complexity(&spec(10, &[], 5, 3));
        assert_eq!(c.params, 55 + 18);
        assert_eq!(c.macs, 50 + 15);
        // the head alone of a 4 -> 4 -> 2 net is 4*2 + 2
        let c = count_complexity(&spec(4, &[], 4, 2));
        assert_eq!(c.params, 20 + 10);
    }

    #[test]
    fn budget_pass_and_fail() {
        let budget = ComplexityBudget::default();
        let small = enforce_budget(&spec(10, &[5], 5, 3), &budget);
        assert!(small.passed);
        assert!(small.param_margin() > 100_000);
        assert!(enforce_budget(&spec(1, &[], 1, 2), &budget).passed);

        // 6000*5000 = 30M MACs in the first layer alone
        let big = enforce_budget(&spec(6000, &[5001], 2, 2), &budget);
        assert!(!big.passed);
        assert!(big.violations().iter().any(|l| l.starts_with("MACs")));
        assert!(big.violations().iter().any(|l| l.starts_with("parameters")));
        assert!(big.to_string().contains("FAIL MACs"));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let s = spec(3, &[4], 2, 3);
        let mut m = Mlp::init(&s, &mut stream(0, 0)).unwrap();
        for l in m.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        m.layers_mut()[2].bias = Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]);
        let out = m.forward(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0])).unwrap();
        assert_eq!(out.logits.row(0), &[0.1, -0.2, 0.3]);
        assert_eq!(out.logits.row(1), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn hand_computed_forward() {
        // 2 -> 2 identity embedding, head [[1,2],[3,4]] + [0.5, -0.5]
        let s = spec(2, &[], 2, 2);
        let m = Mlp::from_flat(&s, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let out = m.forward(&Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
        assert_eq!(out.embedding.data(), &[1.0, 2.0]);
        assert_eq!(out.logits.data(), &[7.5, 9.5]);
        // relu clips the negative embedding unit
        let out = m.forward(&Tensor::matrix(1, 2, vec![-1.0, 2.0])).unwrap();
        assert_eq!(out.embedding.data(), &[0.0, 2.0]);
    }

    #[test]
    fn identical_rows_identical_logits_and_tape_agrees() {
        let s = spec(4, &[6], 3, 3);
        let m = Mlp::init(&s, &mut stream(2, 0)).unwrap();
        let x = Tensor::matrix(3, 4, [0.3, -1.0, 2.0, 0.5].repeat(3));
        let out = m.forward(&x).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(2));
        let tape = Tape::new();
        let tf = m.forward_tape(&tape, &x).unwrap();
        assert_eq!(tf.logits.to_tensor(), out.logits);
        assert_eq!(tf.embedding.to_tensor(), out.embedding);
        assert!(m.forward(&Tensor::zeros(1, 5)).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_bias() {
        let s = spec(8, &[7], 5, 3);
        let a = Mlp::init(&s, &mut stream(1, 0)).unwrap();
        let b = Mlp::init(&s, &mut stream(1, 0)).unwrap();
        let c = Mlp::init(&s, &mut stream(2, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let last = a.layers().len() - 1;
        for (k, l) in a.layers().iter().enumerate() {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
            let mut limit = (6.0 / (l.weight.rows() + l.weight.cols()) as f64).sqrt();
            if k == last {
                limit *= DEFAULT_HEAD_INIT_SCALE;
            }
            assert!(l.weight.data().iter().all(|w| w.abs() <= limit));
            assert!(l.weight.data().iter().any(|&w| w != 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let s = spec(5, &[4, 3], 2, 3);
        let m = Mlp::init(&s, &mut stream(3, 0)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(Mlp::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Mlp::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(Mlp::from_bytes(&bytes[..9]), Err(Error::Format { .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(spec(0, &[], 2, 2).validate().is_err());
        assert!(spec(3, &[0], 2, 2).validate().is_err());
        assert!(spec(3, &[], 2, 1).validate().is_err());
    }
}
