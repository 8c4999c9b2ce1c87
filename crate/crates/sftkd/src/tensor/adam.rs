//! Adam optimizer with bias correction.
//!
//! Moment state is kept in the training scalar type; the hyper-parameters are
//! plain f64 and converted once per step. Updates touch parameters in slice
//! order, so optimization trajectories are bitwise reproducible.

use super::Scalar;
use crate::{Error, Result};

/// Adam hyper-parameters. `Default` gives lr 1e-3, betas (0.9, 0.999),
/// eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step counter for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update of `params` in place. `what` names the parameter group in
/// error messages; a non-finite gradient entry aborts before any parameter is
/// touched.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    what: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam '{what}': params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of '{what}' at index {i} is {}",
            grads[i]
        )));
    }
    state.t += 1;
    let b1 = T::of_f64(hyper.beta1);
    let b2 = T::of_f64(hyper.beta2);
    let one = T::one();
    let eps = T::of_f64(hyper.eps);
    // bias-corrected step size folded into a single scalar
    let corr1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let corr2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let step = T::of_f64(hyper.lr / corr1);
    let corr2_sqrt = T::of_f64(corr2.sqrt());
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let denom = state.v[i].sqrt() / corr2_sqrt + eps;
        params[i] = params[i] - step * state.m[i] / denom;
    }
    Ok(())
}
