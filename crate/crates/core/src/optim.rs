use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step on `param` using `grad`.
pub fn adam_update(param: &mut Tensor, grad: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(RcaError::Usage(format!(
            "adam: parameter of {} entries, gradient of {}, state of {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}
