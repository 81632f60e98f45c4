//! AdamW with two learning-rate groups and a cosine schedule.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use super::grad::Gradients;
use crate::classifier::ResidualSet;
use crate::{Error, Real, Result};

/// Moments and step count for the four residual blocks. Block order is
/// `[t_pos, t_neg, v_pos, v_neg]`; positives use `lr_pos`, negatives
/// `lr_neg`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: [Array2<T>; 4],
    pub v: [Array2<T>; 4],
    pub step: u64,
    /// Current learning rate of the positive group.
    pub lr_pos: f64,
    /// Current learning rate of the negative group.
    pub lr_neg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

const POSITIVE_GROUP: [bool; 4] = [true, false, true, false];

impl<T: Real> OptimizerState<T> {
    pub fn new(c: usize, d: usize, lr_pos: f64, lr_neg: f64, weight_decay: f64) -> Self {
        let z = || Array2::zeros((c, d));
        OptimizerState {
            m: [z(), z(), z(), z()],
            v: [z(), z(), z(), z()],
            step: 0,
            lr_pos,
            lr_neg,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam step on every enabled block:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
pub fn adamw_step<T: Real>(state: &mut OptimizerState<T>, params: &mut ResidualSet<T>, grads: &Gradients<T>) -> Result<()> {
    let enabled = params.enabled.as_array();
    for (p, g) in params.blocks().iter().zip(grads.blocks()) {
        if p.dim() != g.dim() {
            return Err(Error::arg(format!(
                "gradient shape {:?} != parameter shape {:?}",
                g.dim(),
                p.dim()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let eps = T::of(state.eps);
    let wd = T::of(state.weight_decay);
    let one = T::one();

    for (i, (p, g)) in params.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
        if !enabled[i] {
            continue;
        }
        let lr = T::of(if POSITIVE_GROUP[i] { state.lr_pos } else { state.lr_neg });
        Zip::from(p)
            .and(g)
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *p;
            });
    }
    Ok(())
}

/// `0.5 * lr_max * (1 + cos(pi * step / total))`, floored at zero.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::arg("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::arg(format!("step {step} beyond total {total_steps}")));
    }
    let lr = 0.5 * lr_max * (1.0 + (PI * step as f64 / total_steps as f64).cos());
    Ok(lr.max(0.0))
}
