//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    /// Per-parameter switch for weight decay (off for norms, biases and
    /// SSM dynamics parameters).
    pub decay_mask: Vec<bool>,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    /// Zero moments shaped like `params`, decaying every parameter.
    pub fn new(params: &[Tensor], hyper: AdamWConfig) -> Self {
        Self::with_decay_mask(params, vec![true; params.len()], hyper)
    }

    pub fn with_decay_mask(params: &[Tensor], decay_mask: Vec<bool>, hyper: AdamWConfig) -> Self {
        assert_eq!(decay_mask.len(), params.len(), "decay mask length");
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            step: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            decay_mask,
            hyper,
        }
    }
}

/// One AdamW update at `state.hyper.lr`.
///
/// Decay multiplies the parameter by `1 - lr·wd` before the adaptive step;
/// it never enters the moment estimates.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape(format!(
                "adamw: parameter {i} has shape {:?}, grad {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if state.decay_mask[i] {
            1.0 - h.lr * h.weight_decay
        } else {
            1.0
        };
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
            *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv * decay - h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::range(format!("step {step} beyond {total_steps}")));
    }
    if lr_min > lr_max {
        return Err(Error::range(format!("lr_min {lr_min} above lr_max {lr_max}")));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
