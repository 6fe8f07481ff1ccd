use crate::error::{Result, SsmtError};

/// Per-parameter Adam moment buffers. Moments start at zero; the step
/// counter increases by exactly 1 per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }
}

/// Adam hyperparameters; weight decay is decoupled from the moment update.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One bias-corrected Adam update in place. `name` labels the parameter in
/// the non-finite-gradient fault.
pub fn adam_step(
    name: &str,
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    lr: f32,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(SsmtError::Contract(format!(
            "adam_step '{name}': param {} / grad {} / state {} lengths differ",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(SsmtError::NonFinite(format!("gradient of parameter '{name}'")));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - (hyper.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (hyper.beta2 as f64).powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] as f64 / bc1;
        let v_hat = state.v[i] as f64 / bc2;
        let update = m_hat / (v_hat.sqrt() + hyper.eps as f64);
        param[i] -= lr * (update as f32 + hyper.weight_decay * param[i]);
    }
    Ok(())
}

/// Cosine annealing: lr_min + 0.5(lr0−lr_min)(1+cos(π·step/total)).
/// Steps at or past the end clamp to lr_min.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f32, lr_min: f32) -> f32 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let progress = step as f64 / total_steps as f64;
    let cos = (std::f64::consts::PI * progress).cos();
    (lr_min as f64 + 0.5 * (lr0 as f64 - lr_min as f64) * (1.0 + cos)) as f32
}
