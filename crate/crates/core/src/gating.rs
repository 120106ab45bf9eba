//! Per-channel gates: a hard 0/1 decision in the forward pass and the
//! softmax probability of the "on" logit in the backward pass.
//!
//! [`gamma_op`] and [`gamma_layer`] turn gate vectors into differentiable
//! channel counts. Their forward values are integers (the number of open
//! channels, or the size of the union of open channels across operations);
//! their backward passes route an upstream gradient to every contributing
//! gate through [`gate_backward`], treating the union's binarization as the
//! identity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::config_err;
use crate::Result;

/// The two logits of one channel gate plus their accumulated gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatePair {
    pub psi_on: f32,
    pub psi_off: f32,
    pub grad_on: f32,
    pub grad_off: f32,
}

impl GatePair {
    pub fn new(psi_on: f32, psi_off: f32) -> Self {
        GatePair { psi_on, psi_off, grad_on: 0.0, grad_off: 0.0 }
    }

    /// Open iff `psi_on > psi_off`; ties close the gate.
    pub fn decision(&self) -> bool {
        self.psi_on > self.psi_off
    }

    /// `softmax(psi)[on]`.
    pub fn surrogate(&self) -> f64 {
        sigmoid(self.psi_on as f64 - self.psi_off as f64)
    }

    /// Adds the surrogate gradient of `upstream` into `grad_on`/`grad_off`.
    pub fn accumulate(&mut self, upstream: f64) {
        let (on, off) = gate_backward(self, upstream);
        self.grad_on += on as f32;
        self.grad_off += off as f32;
    }

    pub fn zero_grad(&mut self) {
        self.grad_on = 0.0;
        self.grad_off = 0.0;
    }
}

impl Default for GatePair {
    /// Starts open (surrogate ~0.73) so search begins from the pretrained network.
    fn default() -> Self {
        GatePair::new(1.0, 0.0)
    }
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + libm::exp(-d))
    } else {
        let e = libm::exp(d);
        e / (1.0 + e)
    }
}

pub fn gate_forward(g: &GatePair) -> f32 {
    if g.decision() {
        1.0
    } else {
        0.0
    }
}

/// Gradient of `softmax_on(psi)` scaled by `upstream`, as `(d/dpsi_on, d/dpsi_off)`.
pub fn gate_backward(g: &GatePair, upstream: f64) -> (f64, f64) {
    let s = g.surrogate();
    let d = upstream * s * (1.0 - s);
    (d, -d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateVecId(pub(crate) usize);

impl GateVecId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operation a gate vector masks: `(layer, operation)`.
///
/// Reducers use `op == usize::MAX`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateOwner {
    pub layer: usize,
    pub op: usize,
}

impl GateOwner {
    pub const REDUCER: usize = usize::MAX;
}

/// One gate per output channel of an operation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub gates: Vec<GatePair>,
    pub owner: GateOwner,
}

impl GateVector {
    pub fn open(channels: usize, owner: GateOwner) -> Self {
        GateVector { gates: vec![GatePair::default(); channels], owner }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Binary mask as floats.
    pub fn mask(&self) -> Vec<f32> {
        self.gates.iter().map(gate_forward).collect()
    }

    pub fn surrogates(&self) -> Vec<f32> {
        self.gates.iter().map(|g| g.surrogate() as f32).collect()
    }

    /// Indices of open channels, increasing.
    pub fn active(&self) -> Vec<usize> {
        self.gates.iter().enumerate().filter(|(_, g)| g.decision()).map(|(i, _)| i).collect()
    }

    /// Routes a per-channel upstream gradient (dL/dmask) into the gates.
    pub fn accumulate_mask_grad(&mut self, upstream: &[f32]) {
        for (g, &u) in self.gates.iter_mut().zip(upstream) {
            g.accumulate(u as f64);
        }
    }
}

/// All gate vectors of a network.
#[derive(Clone, Debug, Default)]
pub struct GateStore {
    vectors: Vec<GateVector>,
}

impl GateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: GateVector) -> GateVecId {
        self.vectors.push(v);
        GateVecId(self.vectors.len() - 1)
    }

    pub fn get(&self, id: GateVecId) -> &GateVector {
        &self.vectors[id.0]
    }

    pub fn get_mut(&mut self, id: GateVecId) -> &mut GateVector {
        &mut self.vectors[id.0]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GateVecId, &GateVector)> {
        self.vectors.iter().enumerate().map(|(i, v)| (GateVecId(i), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut GateVector> {
        self.vectors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for v in &mut self.vectors {
            v.gates.iter_mut().for_each(GatePair::zero_grad);
        }
    }

    pub fn total_gates(&self) -> usize {
        self.vectors.iter().map(GateVector::len).sum()
    }
}

/// Number of open channels of one operation.
pub fn gamma_op(v: &GateVector) -> f64 {
    v.gates.iter().filter(|g| g.decision()).count() as f64
}

/// Backward of [`gamma_op`]: every gate receives `upstream` through its surrogate.
pub fn gamma_op_backward(v: &mut GateVector, upstream: f64) {
    v.gates.iter_mut().for_each(|g| g.accumulate(upstream));
}

/// Number of channels open in at least one of `vectors` (and of `skip`, when
/// the layer output also receives an identity connection).
pub fn gamma_layer(vectors: &[&GateVector], skip: Option<&[&GateVector]>) -> Result<f64> {
    let mut all = vectors.iter().chain(skip.unwrap_or(&[]).iter());
    let Some(first) = all.next() else {
        return Ok(0.0);
    };
    let width = first.len();
    let mut union = vec![false; width];
    for v in core::iter::once(first).chain(all) {
        if v.len() != width {
            return Err(config_err!(
                "gate vectors of one layer must have equal length, got {} and {}",
                width,
                v.len()
            ));
        }
        for (u, g) in union.iter_mut().zip(&v.gates) {
            *u |= g.decision();
        }
    }
    Ok(union.iter().filter(|&&u| u).count() as f64)
}

/// Backward of [`gamma_layer`]: the union's binarization acts as the
/// identity, so each contributing gate receives `upstream` through its
/// surrogate exactly once.
pub fn gamma_layer_backward(store: &mut GateStore, ids: &[GateVecId], upstream: f64) {
    for &id in ids {
        gamma_op_backward(store.get_mut(id), upstream);
    }
}

/// Indices open in at least one of the vectors.
pub fn union_active(vectors: &[&GateVector]) -> Vec<usize> {
    let width = vectors.first().map_or(0, |v| v.len());
    (0..width).filter(|&c| vectors.iter().any(|v| v.gates[c].decision())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owner() -> GateOwner {
        GateOwner { layer: 0, op: 0 }
    }

    fn vector(bits: &[u8]) -> GateVector {
        GateVector {
            gates: bits.iter().map(|&b| if b == 1 { GatePair::new(1.0, 0.0) } else { GatePair::new(0.0, 1.0) }).collect(),
            owner: owner(),
        }
    }

    #[test]
    fn forward_decisions() {
        assert_eq!(gate_forward(&GatePair::new(1.0, 0.0)), 1.0);
        assert_eq!(gate_forward(&GatePair::new(0.0, 0.0)), 0.0);
        assert_eq!(gate_forward(&GatePair::new(-3.2, 5.1)), 0.0);
    }

    #[test]
    fn backward_at_symmetric_point() {
        assert_eq!(gate_backward(&GatePair::new(0.0, 0.0), 1.0), (0.25, -0.25));
        assert_eq!(gate_backward(&GatePair::new(3.0, -2.0), 0.0), (0.0, -0.0));
    }

    #[test]
    fn counts() {
        assert_eq!(gamma_op(&vector(&[1, 0, 1, 1, 0])), 3.0);
        assert_eq!(gamma_op(&vector(&[0, 0, 0])), 0.0);
        let (a, b) = (vector(&[1, 0, 1]), vector(&[0, 0, 1]));
        assert_eq!(gamma_layer(&[&a, &b], None).unwrap(), 2.0);
        let z = vector(&[0, 0, 0]);
        assert_eq!(gamma_layer(&[&z, &z], None).unwrap(), 0.0);
        let skip = vector(&[0, 1, 0]);
        assert_eq!(gamma_layer(&[&a, &b], Some(&[&skip])).unwrap(), 3.0);
    }

    #[test]
    fn union_rejects_length_mismatch() {
        let (a, b) = (vector(&[1, 0, 1]), vector(&[0, 1]));
        assert!(matches!(gamma_layer(&[&a, &b], None), Err(crate::Error::Config(_))));
    }

    #[test]
    fn default_gate_starts_open() {
        let g = GatePair::default();
        assert!(g.decision());
        assert!((g.surrogate() - 0.7310585786).abs() < 1e-9);
    }
}
