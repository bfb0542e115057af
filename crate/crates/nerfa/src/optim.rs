//! Adam optimizer and the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::NerfaModel;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `lr0 * exp(-decay * step)`; step 0 returns `lr0` untouched.
pub fn lr_schedule(lr0: f64, decay: f64, step: u64) -> f64 {
    lr0 * (-decay * step as f64).exp()
}

/// One bias-corrected Adam update on a single parameter array.
///
/// `t` is the 1-based update index. Epsilon sits outside the square root:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    t: u64,
) {
    let bias1 = 1.0 - BETA1.powf(t as f64);
    let bias2 = 1.0 - BETA2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

/// First and second moment for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state: moments per parameter in the model's canonical order,
/// plus the completed update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    steps: u64,
    slots: Vec<MomentSlot>,
}

impl Adam {
    /// Fresh zero-moment state matching `model`'s parameters.
    pub fn for_model(model: &NerfaModel) -> Adam {
        let mut slots = Vec::new();
        model.visit_params(&mut |name, t| {
            slots.push(MomentSlot {
                name,
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
            });
        });
        Adam { steps: 0, slots }
    }

    /// Restores saved state, checking it mirrors `model`'s parameters.
    pub fn from_state(steps: u64, slots: Vec<MomentSlot>, model: &NerfaModel) -> Result<Adam> {
        let fresh = Adam::for_model(model);
        if slots.len() != fresh.slots.len() {
            return Err(Error::Format(format!(
                "optimizer state has {} parameter slots, model has {}",
                slots.len(),
                fresh.slots.len()
            )));
        }
        for (got, want) in slots.iter().zip(&fresh.slots) {
            if got.name != want.name {
                return Err(Error::Format(format!(
                    "optimizer slot '{}' does not match model parameter '{}'",
                    got.name, want.name
                )));
            }
            if got.m.len() != want.m.len() || got.v.len() != want.v.len() {
                return Err(Error::Format(format!(
                    "optimizer slot '{}' has {} / {} moments, parameter has {} elements",
                    got.name,
                    got.m.len(),
                    got.v.len(),
                    want.m.len()
                )));
            }
        }
        Ok(Adam { steps, slots })
    }

    /// Completed update count.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn slots(&self) -> &[MomentSlot] {
        &self.slots
    }

    /// Applies one update. `grads` must list every parameter in canonical
    /// order, as produced by a traced forward pass.
    pub fn step(
        &mut self,
        model: &mut NerfaModel,
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "got gradients for {} parameters, expected {}",
                grads.len(),
                self.slots.len()
            )));
        }
        let t = self.steps + 1;
        let slots = &mut self.slots;
        let mut idx = 0;
        let mut problem: Option<Error> = None;
        model.visit_params_mut(&mut |name, tensor| {
            if problem.is_some() {
                return;
            }
            if idx >= slots.len() {
                problem = Some(Error::Contract(format!(
                    "model has more parameters than optimizer slots (at '{name}')"
                )));
                return;
            }
            let slot = &mut slots[idx];
            let (grad_name, grad) = &grads[idx];
            if slot.name != name || grad_name != &name {
                problem = Some(Error::Contract(format!(
                    "parameter order mismatch at '{name}' (slot '{}', gradient '{grad_name}')",
                    slot.name
                )));
                return;
            }
            if grad.len() != tensor.len() {
                problem = Some(Error::Contract(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    grad.len(),
                    tensor.len()
                )));
                return;
            }
            adam_update(tensor.values_mut(), grad, &mut slot.m, &mut slot.v, lr, t);
            idx += 1;
        });
        if let Some(err) = problem {
            return Err(err);
        }
        self.steps = t;
        Ok(())
    }
}
