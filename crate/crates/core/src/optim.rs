//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One update of every parameter from its accumulated gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Numerics(format!("non-finite gradient for parameter {}", p.name)));
    }
    if state.m.len() != store.params().len() {
        return Err(Error::State("adam state does not match the parameter store".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let w = p.value.data_mut();
        for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::from_f64(mf);
            *vi = T::from_f64(vf);
            let step = cfg.lr * (mf / bc1) / ((vf / bc2).sqrt() + cfg.eps);
            *wi = T::from_f64(wi.as_f64() - step);
        }
    }
    Ok(())
}
