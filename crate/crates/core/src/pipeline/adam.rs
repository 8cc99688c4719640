//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::AdamConfig;

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One update of every tensor in `params`, consuming their gradients.
///
/// The gradient buffers are left in place; callers zero them.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state belongs to another model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        for (((x, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
