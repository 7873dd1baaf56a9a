use serde::{Deserialize, Serialize};

use super::RegressorError;

/// Step learning rate: `base` multiplied by `factor` once for every milestone
/// (a fraction of `total`) already reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
    pub total: usize,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            factor: 1.0,
            total: 0,
        }
    }

    /// Halve at 60, 80 and 90 % of the run.
    pub fn halving(base: f64, total: usize) -> Self {
        Self {
            base,
            milestones: vec![0.6, 0.8, 0.9],
            factor: 0.5,
            total,
        }
    }

    /// Learning rate used by the step with 0-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| step as f64 >= *m * self.total as f64)
            .count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(n: usize, schedule: LrSchedule) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
) -> Result<(), RegressorError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(RegressorError::DimensionMismatch {
            expected: state.m.len(),
            got: params.len().max(grads.len()),
        });
    }
    let lr = state.lr();
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
