use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams};

/// Linear warmup to `peak` at step `warmup`, then inverse square-root decay.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads
        .fields()
        .iter()
        .map(|(_, t)| t.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.fields_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
        }
    }
}

/// Adam moments shaped like the parameters, plus the number of updates
/// applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &ModelConfig) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(cfg),
            v: params.zeros_like(cfg),
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update; advances `state.step`.
    pub fn update(
        &self,
        params: &mut ModelParams,
        grads: &ModelParams,
        state: &mut OptimizerState,
        lr: f64,
    ) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let leaves = params
            .fields_mut()
            .into_iter()
            .zip(grads.fields())
            .zip(state.m.fields_mut())
            .zip(state.v.fields_mut());
        for (((p, (_, g)), m), v) in leaves {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
