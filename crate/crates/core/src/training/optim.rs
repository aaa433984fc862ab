use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied updates so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// Checks that the moments mirror `store`.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Decay `θ ← θ − lr·wd·θ` applies to tensors flagged for decay in the
/// store; the moment update applies to all of them.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != store.len() || !state.matches(store) {
        return Err(Error::InvalidArgument("gradients or optimizer state do not match the parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, f64::from(t));
    let c2 = 1.0 - libm::pow(ADAM_BETA2, f64::from(t));
    for i in 0..store.len() {
        let g = &grads[i];
        if g.shape() != store.tensor(i).shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: store.tensor(i).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let decay = if store.decays(i) { lr * weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = store.tensor_mut(i).data_mut();
        for j in 0..theta.len() {
            let gj = g.data()[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= decay * theta[j];
            theta[j] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(Tensor::sum_squares).sum();
    let norm = libm::sqrt(sq);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss scale with the skip-and-halve overflow protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScaler {
    scale: f64,
    skipped: u64,
}

impl LossScaler {
    pub fn new(scale: f64) -> Self {
        Self { scale, skipped: 0 }
    }

    /// Scaler resumed with a saved scale and skip count.
    pub fn restore(scale: f64, skipped: u64) -> Self {
        Self { scale, skipped }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Divides scaled gradients by the scale. Returns `false`, halving the
    /// scale and counting a skip, if any result is not finite.
    pub fn unscale(&mut self, grads: &mut [Tensor]) -> bool {
        let mut finite = true;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x /= self.scale;
                finite &= x.is_finite();
            }
        }
        if !finite {
            self.overflow();
        }
        finite
    }

    pub fn overflow(&mut self) {
        self.scale *= 0.5;
        self.skipped += 1;
    }
}
