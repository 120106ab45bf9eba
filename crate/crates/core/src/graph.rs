//! Tape-based reverse-mode automatic differentiation.
//!
//! Every call on a [`Graph`] evaluates one primitive eagerly and appends a
//! node. Nodes are created in topological order, so [`Graph::backward`]
//! walks them once in reverse. Parameters enter through [`Graph::param`]
//! (copied from a [`ParamStore`]) and gate masks through
//! [`Graph::channel_gate`]; their gradients are returned in [`Gradients`]
//! for the caller to fold back into the stores.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::gating::GateVecId;
use crate::kernels::{self, ActivationKind, BnSaved, RunningStats};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved, train: bool },
    Activation { x: Var, kind: ActivationKind },
    Prelu { x: Var, slope: Var },
    ChannelGate { x: Var, gate: Option<GateVecId>, feature_scale: Vec<f32> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MaxPool { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<u32>, probs: Tensor },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of the loss with respect to parameters and gate masks.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<ParamId, Vec<f32>>,
    /// `dL/dmask[c]` per gate vector, before the gate surrogate is applied.
    pub gates: BTreeMap<GateVecId, Vec<f32>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(&id).map(Vec::as_slice)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

fn add_into(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes so the graph can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.zero_grad();
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x), self.value(w), bias, stride, padding, groups)?;
        Ok(self.push(out, Op::Conv { x, w, b, stride, padding, groups }))
    }

    /// Train-mode batch norm. Returns the batch mean and biased variance so
    /// the caller can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BnSaved)> {
        let (out, saved) =
            kernels::batchnorm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let stats = BnSaved { xhat: Vec::new(), inv_std: Vec::new(), mean: saved.mean.clone(), var: saved.var.clone() };
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, saved, train: true }), stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats, eps: f32) -> Result<Var> {
        let out = kernels::batchnorm_eval(self.value(x), self.value(gamma).data(), self.value(beta).data(), stats, eps)?;
        let inv_std: Vec<f32> = stats.var.iter().map(|&v| (1.0 / libm::sqrt(v as f64 + eps as f64)) as f32).collect();
        let (_, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xhat = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - stats.mean[ch]) * inv_std[ch]
            })
            .collect();
        let saved = BnSaved { xhat, inv_std, mean: stats.mean.clone(), var: stats.var.clone() };
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved, train: false }))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let out = kernels::activation_forward(self.value(x), kind);
        self.push(out, Op::Activation { x, kind })
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = kernels::prelu_forward(self.value(x), self.value(slope).data())?;
        Ok(self.push(out, Op::Prelu { x, slope }))
    }

    /// Multiplies channel `c` of `x` by `mask[c]`.
    ///
    /// The gradient reaching `x` is scaled by `feature_scale[c]` (normally the
    /// mask itself). When `gate` is set, `sum_{n,h,w} dL/dy * x` is reported
    /// for it in [`Gradients::gates`].
    pub fn channel_gate(&mut self, x: Var, mask: &[f32], feature_scale: Vec<f32>, gate: Option<GateVecId>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if mask.len() != c || feature_scale.len() != c {
            return Err(shape_err!("channel mask of length {} for {c} channels", mask.len()));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                out[(b * c + ch) * hw..][..hw].iter_mut().for_each(|v| *v *= mask[ch]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::ChannelGate { x, gate, feature_scale }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("cannot add {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("cannot multiply {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect()).expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::linear_forward(self.value(x), self.value(w), bias)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Propagates `d loss / d node` for every node recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State("backward called twice without reset".to_string()));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let dy_t = Tensor::new(node.value.shape(), dy.clone())?;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let slot = out.params.entry(*id).or_insert_with(|| vec![0.0; dy.len()]);
                    slot.iter_mut().zip(&dy).for_each(|(a, v)| *a += v);
                }
                Op::Conv { x, w, b, stride, padding, groups } => {
                    let g = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy_t,
                        *stride,
                        *padding,
                        *groups,
                    )?;
                    add_into(&mut grads[x.0], g.input.data());
                    add_into(&mut grads[w.0], g.weight.data());
                    if let Some(b) = b {
                        add_into(&mut grads[b.0], &g.bias);
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved, train } => {
                    let gm = self.value(*gamma).data();
                    let (dx, dg, db) = if *train {
                        let (dx, dg, db) = kernels::batchnorm_backward(&dy_t, saved, gm)?;
                        (dx.into_data(), dg, db)
                    } else {
                        let (_, c, h, w) = dy_t.dims4()?;
                        let hw = h * w;
                        let mut dx = dy.clone();
                        let (mut dg, mut db) = (vec![0.0f32; c], vec![0.0f32; c]);
                        for (j, v) in dx.iter_mut().enumerate() {
                            let ch = (j / hw) % c;
                            dg[ch] += *v * saved.xhat[j];
                            db[ch] += *v;
                            *v *= gm[ch] * saved.inv_std[ch];
                        }
                        (dx, dg, db)
                    };
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gamma.0], &dg);
                    add_into(&mut grads[beta.0], &db);
                }
                Op::Activation { x, kind } => {
                    let dx = kernels::activation_backward(self.value(*x), &node.value, &dy_t, *kind);
                    add_into(&mut grads[x.0], dx.data());
                }
                Op::Prelu { x, slope } => {
                    let (dx, ds) = kernels::prelu_backward(self.value(*x), self.value(*slope).data(), &dy_t)?;
                    add_into(&mut grads[x.0], dx.data());
                    add_into(&mut grads[slope.0], &ds);
                }
                Op::ChannelGate { x, gate, feature_scale } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let mut dx = dy.clone();
                    let mut dmask = vec![0.0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let mut acc = 0.0f32;
                            for j in base..base + hw {
                                acc += dy[j] * xv.data()[j];
                                dx[j] *= feature_scale[ch];
                            }
                            dmask[ch] += acc;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    if let Some(id) = gate {
                        let slot = out.gates.entry(*id).or_insert_with(|| vec![0.0; c]);
                        slot.iter_mut().zip(&dmask).for_each(|(a, v)| *a += v);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &dy);
                    add_into(&mut grads[b.0], &dy);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f32> = dy.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                    let db: Vec<f32> = dy.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Scale(x, f) => {
                    let dx: Vec<f32> = dy.iter().map(|g| g * f).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool2_backward(self.value(*x).shape(), argmax, &dy_t)?;
                    add_into(&mut grads[x.0], dx.data());
                }
                Op::GlobalAvgPool(x) => {
                    let dx = kernels::global_avg_pool_backward(self.value(*x).shape(), &dy_t)?;
                    add_into(&mut grads[x.0], dx.data());
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &dy_t)?;
                    add_into(&mut grads[x.0], dx.data());
                    add_into(&mut grads[w.0], dw.data());
                    if let Some(b) = b {
                        add_into(&mut grads[b.0], &db);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let d = kernels::softmax_cross_entropy_backward(probs, labels, dy[0]);
                    add_into(&mut grads[logits.0], d.data());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    add_into(&mut grads[x.0], &vec![dy[0]; n]);
                }
            }
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(out)
    }
}
