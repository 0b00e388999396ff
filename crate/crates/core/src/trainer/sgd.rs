//! Momentum SGD with coupled (classical) weight decay.
//!
//! ```text
//! buf ← momentum·buf + grad + weight_decay·param
//! param ← param − lr·buf
//! ```
//!
//! The parameter update is a single fused multiply-add, so the result is
//! the correctly rounded value of `param − lr·buf`. Parameters with a lower
//! bound are clamped after the step.

use crate::error::{Error, Result};
use crate::ndtensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum buffer per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub buffers: Vec<Tensor<f64>>,
}

impl SgdState {
    pub fn new(params: &ParamStore<f64>) -> Self {
        Self {
            buffers: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// Scalar form of one step; returns `(param, buffer)`.
pub fn sgd_scalar(param: f64, grad: f64, buf: f64, cfg: &SgdConfig) -> (f64, f64) {
    let mut b = cfg.momentum.mul_add(buf, grad);
    if cfg.weight_decay != 0.0 {
        b = cfg.weight_decay.mul_add(param, b);
    }
    ((-cfg.lr).mul_add(b, param), b)
}

pub fn sgd_step(
    params: &mut ParamStore<f64>,
    grads: &[Tensor<f64>],
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::contract(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} buffers",
                params.len(),
                grads.len(),
                state.buffers.len()
            ),
        ));
    }
    for ((p, g), b) in params.iter().zip(grads).zip(&state.buffers) {
        if p.value.shape() != g.shape() || p.value.shape() != b.shape() {
            return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
        }
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        for ((w, &gi), bi) in p.value.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
            (*w, *bi) = sgd_scalar(*w, gi, *bi, cfg);
        }
        if let Some(lo) = p.lower_bound {
            p.value.data_mut().iter_mut().for_each(|w| *w = w.max(lo));
        }
    }
    Ok(())
}
