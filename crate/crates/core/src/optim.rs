//! Adam with bias correction, plus the per-epoch exponential decay schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Moment estimates for a single parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `param` in place. A zero learning rate leaves the
/// parameter bit-identical while still advancing the moments.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(shape_err("adam_step", param.shape(), grad.shape()));
    }
    if state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(shape_err("adam_step state", param.shape(), &[state.m.len()]));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Param(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    state.t += 1;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let one = T::one();
    let c1 = T::of(1.0 - Float::powi(state.beta1, state.t as i32));
    let c2 = T::of(1.0 - Float::powi(state.beta2, state.t as i32));
    let eps = T::of(state.eps);
    let lr = T::of(lr);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning rate for a zero-based epoch: `lr0 * gamma^epoch`.
pub fn exponential_lr(lr0: f64, gamma: f64, epoch: u32) -> f64 {
    lr0 * Float::powi(gamma, epoch as i32)
}
