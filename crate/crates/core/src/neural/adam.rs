use serde::{Deserialize, Serialize};

use super::{l2_norm, NeuralError, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(10.0), weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One Adam step. A non-finite gradient leaves parameters and optimizer
/// state untouched and returns [`NeuralError::NonFiniteGradient`].
pub fn apply_update(
    params: &mut Parameters,
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<UpdateStats, NeuralError> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NeuralError::Dimension(format!(
            "params {n}, grad {}, moments {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let norm = l2_norm(grad);
    if !norm.is_finite() {
        log::warn!("skipping update: non-finite gradient");
        return Err(NeuralError::NonFiniteGradient);
    }
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t.min(i32::MAX as u64) as i32);
    for i in 0..n {
        let g = grad[i] * scale + cfg.weight_decay * params.values[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params.values[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(UpdateStats { grad_norm: norm, clipped: scale < 1.0 })
}
