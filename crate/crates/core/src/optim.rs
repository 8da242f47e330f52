//! First-order optimizers over a [`ParamSet`].

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// SGD with momentum 0.9.
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Optimizer with its moment buffers. `m` holds Adam's first moment or the
/// SGD velocity; `v` is empty for SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("optimizer state covers {state} tensors but the model has {params}")]
    StateShape { state: usize, params: usize },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.data.len()]).collect::<Vec<_>>();
        let v = match kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self { kind, lr, t: 0, m: zeros(), v }
    }

    /// Checks restored buffers against the parameters they will update.
    pub fn check(&self, params: &ParamSet<T>) -> Result<(), OptimError> {
        let fits = |bufs: &Vec<Vec<T>>| {
            bufs.len() == params.len() && bufs.iter().zip(params.iter()).all(|(b, p)| b.len() == p.data.len())
        };
        let v_ok = match self.kind {
            OptimizerKind::Adam => fits(&self.v),
            OptimizerKind::Sgd => self.v.is_empty(),
        };
        if fits(&self.m) && v_ok {
            Ok(())
        } else {
            Err(OptimError::StateShape { state: self.m.len(), params: params.len() })
        }
    }

    /// One update from the gradients stored in `params`. A zero step leaves
    /// the weight bit pattern alone (subtracting `-0.0` would flip a `-0.0`).
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.t += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let c1 = T::one() - T::of(libm::pow(ADAM_BETA1, self.t as f64));
                let c2 = T::one() - T::of(libm::pow(ADAM_BETA2, self.t as f64));
                let eps = T::of(ADAM_EPS);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    for k in 0..p.data.len() {
                        let g = p.grad[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        let delta = lr * mhat / (vhat.sqrt() + eps);
                        if delta != T::zero() {
                            p.data[k] -= delta;
                        }
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = T::of(SGD_MOMENTUM);
                for (p, m) in params.iter_mut().zip(&mut self.m) {
                    for k in 0..p.data.len() {
                        m[k] = mu * m[k] + p.grad[k];
                        let delta = lr * m[k];
                        if delta != T::zero() {
                            p.data[k] -= delta;
                        }
                    }
                }
            }
        }
    }
}
