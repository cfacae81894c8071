//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! p <- p (1 - lr wd) - lr * m_hat / (sqrt(v_hat) + eps)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// A parameter together with its gradient for one update.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub param: &'a mut Tensor,
    pub grad: &'a Tensor,
}

/// Applies one AdamW update to every parameter and bumps `state.step`.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both the parameters and the state untouched.
pub fn adamw_step(updates: &mut [ParamUpdate<'_>], state: &mut OptimizerState) -> Result<()> {
    for u in updates.iter() {
        if u.param.shape() != u.grad.shape() {
            return Err(Error::shape("adamw_step", u.param.shape(), u.grad.shape()));
        }
        let bad = u.grad.data().iter().filter(|x| !x.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` has {bad} non-finite entries of {} at optimizer step {}",
                u.name,
                u.grad.numel(),
                state.step
            )));
        }
        if let Some(mo) = state.moments.get(u.name) {
            if mo.m.shape() != u.param.shape() {
                return Err(Error::shape("adamw_step", mo.m.shape(), u.param.shape()));
            }
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (c.beta1 as f64).powi(t);
    let bc2 = 1.0 - (c.beta2 as f64).powi(t);
    let decay = 1.0 - c.lr as f64 * c.weight_decay as f64;

    for u in updates.iter_mut() {
        let mo = state.moments.entry(u.name.to_owned()).or_insert_with(|| Moments {
            m: Tensor::zeros(u.param.shape()),
            v: Tensor::zeros(u.param.shape()),
        });
        let m = mo.m.data_mut();
        let v = mo.v.data_mut();
        let p = u.param.data_mut();
        for i in 0..p.len() {
            let g = u.grad.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            let next = p[i] as f64 * decay - c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64);
            p[i] = next as f32;
        }
    }
    Ok(())
}
