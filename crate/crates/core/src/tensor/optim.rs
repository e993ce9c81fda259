use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(layout: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: layout.zeros_like(),
            v: layout.zeros_like(),
        }
    }
}

/// One AdamW update with decoupled weight decay (`p ← p − lr·wd·p`, then the
/// bias-corrected Adam step).
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::shape("gradients do not match parameters".to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let step = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    let tensors = params.tensors_mut().iter_mut();
    let gs = grads.tensors().iter();
    let ms = state.m.tensors_mut().iter_mut();
    let vs = state.v.tensors_mut().iter_mut();
    for (((p, g), m), v) in tensors.zip(gs).zip(ms).zip(vs) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            if cfg.weight_decay != 0.0 {
                p[j] *= decay;
            }
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            p[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts; period lengths `t0, t0·t_mult, …`.
pub fn cosine_warm_restart_lr(step: u64, base_lr: f64, t0: u64, t_mult: u64) -> f64 {
    let mut t = step;
    let mut period = t0.max(1);
    while t >= period {
        t -= period;
        period = period.saturating_mul(t_mult.max(1));
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / period as f64).cos())
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
