//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Optimizer with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    moments: Option<(ParamSet, ParamSet)>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, moments: None, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one descent step along `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grad.tensors()) {
                    for (x, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (m, v) = self.moments.get_or_insert_with(|| (grad.zeros_like(), grad.zeros_like()));
                let bias1 = 1.0 - beta1.powi(self.t as i32);
                let bias2 = 1.0 - beta2.powi(self.t as i32);
                let tensors = params.tensors_mut().iter_mut().zip(grad.tensors());
                for ((p, g), (mt, vt)) in tensors.zip(m.tensors_mut().iter_mut().zip(v.tensors_mut())) {
                    let slots = mt.as_mut_slice().iter_mut().zip(vt.as_mut_slice());
                    for ((x, &d), (mi, vi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(slots) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *x -= self.lr * (*mi / bias1) / ((*vi / bias2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
