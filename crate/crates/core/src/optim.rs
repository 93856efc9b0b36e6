//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lens: &[usize]) -> Self {
        Self { t: 0, m: lens.iter().map(|&n| vec![0.0; n]).collect(), v: lens.iter().map(|&n| vec![0.0; n]).collect() }
    }
}

/// One Adam update. Nothing is modified when any gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let aligned = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.iter().zip(grads).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && g.len() == m.len());
    if !aligned {
        return Err(Error::InvalidArgument("parameter, gradient and moment shapes differ".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at element {k} is {}", g[k])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
