use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, ParamSet, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<Tensor<T>>,
    pub v: ParamSet<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<Tensor<T>>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every entry of `params`.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<Tensor<T>>,
    grads: &ParamSet<Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    params.check_compatible(&state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    let entries = params
        .iter_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut());
    for ((((_, p), g), (_, m)), (_, v)) in entries {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + c1 * gi;
            v[i] = b2 * v[i] + c2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
