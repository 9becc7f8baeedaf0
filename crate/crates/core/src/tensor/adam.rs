use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Step count per row; dense parameters advance every row together.
    steps: Vec<u32>,
}

/// First and second moment estimates, one entry per parameter in store
/// order. Starts at zero.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over every parameter holding a gradient. Row-sparse
/// parameters only update rows touched by the last backward pass.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    for (_, p) in store.iter() {
        if let Some(g) = &p.tensor.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    if state.moments.len() < store.len() {
        state.moments.resize_with(store.len(), Moments::default);
    }
    for (p, mom) in store.iter_mut().zip(state.moments.iter_mut()) {
        let Some(grad) = p.tensor.grad.as_ref() else {
            continue;
        };
        let n = p.tensor.values.len();
        let cols = p.tensor.cols.max(1);
        if mom.m.len() != n {
            mom.m = vec![0.0; n];
            mom.v = vec![0.0; n];
            mom.steps = vec![0; p.tensor.rows];
        }
        let lr = cfg.lr * p.lr_scale;
        for r in 0..p.tensor.rows {
            if p.row_sparse && !p.touched[r] {
                continue;
            }
            mom.steps[r] += 1;
            let t = mom.steps[r] as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in r * cols..(r + 1) * cols {
                let g = grad[i].to_f64_();
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                let step = lr * mhat / (vhat.sqrt() + cfg.eps);
                p.tensor.values[i] = S::from_f64_(p.tensor.values[i].to_f64_() - step);
            }
        }
    }
    Ok(())
}
