//! Parameter optimizers and the step learning-rate schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::config_err;
use crate::gating::GateStore;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// SGD with (Nesterov) momentum and L2 weight decay.
    SgdNesterov { lr: f32, momentum: f32, weight_decay: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn sgd(lr: f32) -> Self {
        OptimizerKind::SgdNesterov { lr, momentum: 0.9, weight_decay: 1e-4 }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            OptimizerKind::SgdNesterov { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr()));
        }
        if let OptimizerKind::SgdNesterov { momentum, weight_decay, .. } = *self {
            if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                return Err(config_err!("invalid momentum {momentum} / weight decay {weight_decay}"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(config_err!("invalid adam coefficients ({beta1}, {beta2}, {eps})"));
            }
        }
        Ok(())
    }
}

/// Optimizer with per-parameter state, indexed like the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Optimizer { kind, steps: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable parameter from its gradient buffer with
    /// learning rate `lr` (the scheduled value, not necessarily the base one).
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.steps += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        let t = self.steps as i32;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let n = p.tensor.numel();
            let (value, grad) = p.tensor.value_and_grad_mut();
            match self.kind {
                OptimizerKind::SgdNesterov { momentum, weight_decay, .. } => {
                    let buf = &mut self.first[i];
                    if buf.len() != n {
                        *buf = vec![0.0; n];
                    }
                    for j in 0..n {
                        let g = grad[j] + weight_decay * value[j];
                        let update = if momentum > 0.0 {
                            buf[j] = momentum * buf[j] + g;
                            g + momentum * buf[j]
                        } else {
                            g
                        };
                        value[j] -= lr * update;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    if m.len() != n {
                        *m = vec![0.0; n];
                        *v = vec![0.0; n];
                    }
                    let c1 = 1.0 - libm::powf(beta1, t as f32);
                    let c2 = 1.0 - libm::powf(beta2, t as f32);
                    for j in 0..n {
                        let g = grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        value[j] -= lr * m_hat / (libm::sqrtf(v_hat) + eps);
                    }
                }
            }
        }
    }

    /// Named state arrays for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, buf) in self.first.iter().enumerate() {
            out.push((format!("first.{i}"), buf.clone()));
        }
        for (i, buf) in self.second.iter().enumerate() {
            out.push((format!("second.{i}"), buf.clone()));
        }
        out
    }

    /// Restores state written by [`Self::export_state`] after `steps` updates.
    pub fn import_state(&mut self, steps: u64, arrays: &[(String, Vec<f32>)]) -> Result<()> {
        self.first.clear();
        self.second.clear();
        self.steps = steps;
        for (name, data) in arrays {
            let (which, idx) = name
                .split_once('.')
                .and_then(|(w, i)| i.parse::<usize>().ok().map(|i| (w, i)))
                .ok_or_else(|| Error::State(format!("unknown optimizer state entry {name}")))?;
            let target = match which {
                "first" => &mut self.first,
                "second" => &mut self.second,
                _ => return Err(Error::State(format!("unknown optimizer state entry {name}"))),
            };
            if target.len() <= idx {
                target.resize(idx + 1, Vec::new());
            }
            target[idx] = data.clone();
        }
        Ok(())
    }
}

/// Plain gradient descent on gate logits.
pub fn gate_sgd_step(gates: &mut GateStore, lr: f32) {
    for v in gates.iter_mut() {
        for g in &mut v.gates {
            g.psi_on -= lr * g.grad_on;
            g.psi_off -= lr * g.grad_off;
        }
    }
}

/// Step decay: x0.1 from epoch `ceil(T/2)` and again from `ceil(3T/4)`.
pub fn step_decay(base: f32, epoch: usize, total_epochs: usize) -> f32 {
    let mut lr = base;
    if epoch >= total_epochs.div_ceil(2) {
        lr *= 0.1;
    }
    if epoch >= (3 * total_epochs).div_ceil(4) {
        lr *= 0.1;
    }
    lr
}
