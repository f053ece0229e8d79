//! Adam optimizer with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use super::{Array, AutodiffError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators, one pair per parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamState {
    /// Zero-initialized state matching the given parameter arrays.
    pub fn new(params: &[Array]) -> Self {
        Self {
            m: params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Weight decay is added to the gradient before the moment
/// update (coupled L2).
pub fn adam_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), AutodiffError> {
    if lr <= 0.0 {
        return Err(AutodiffError::NonPositiveLearningRate { lr });
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            operand: "grads",
            expected: vec![params.len()],
            got: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                operand: if i % 2 == 0 { "grad" } else { "grad" },
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);

    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let grad = g[j] + weight_decay * p[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * grad;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * grad * grad;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
