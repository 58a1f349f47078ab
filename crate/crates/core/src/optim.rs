//! First-order optimizers over the trainable entries of a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Parameter(format!("unknown optimizer '{other}'"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Moments are kept in f64 and indexed by store position.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on the trainable
    /// parameters, scaled by `grad_scale`. Gradients are left untouched.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grad_scale: f64) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let grads: Vec<f64> = p.tensor.grad().iter().map(|g| g.f64() * grad_scale).collect();
            let values = p.tensor.values_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in values.iter_mut().zip(&grads) {
                        *w = T::of(w.f64() - self.lr * g);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &g)) in values.iter_mut().zip(&grads).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w = T::of(w.f64() - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
                    }
                }
            }
        }
    }
}
