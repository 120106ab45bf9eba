use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::error::config_err;
use crate::graph::{Gradients, Graph, Var};
use crate::kernels::{self, ActivationKind, BnMode, BnSaved, RunningStats};
use crate::Tensor;

/// How gate vectors enter the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Every channel open, no gate gradient (pretraining).
    Open,
    /// Binary decisions as constants (fine-tuning, evaluation).
    Decisions,
    /// Binary decisions with gradients flowing to the gate logits (search).
    Learn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub bn: BnMode,
    pub gates: GateMode,
    /// Running-statistics momentum used in train mode.
    pub bn_momentum: f32,
}

impl ForwardOptions {
    pub fn train(gates: GateMode) -> Self {
        ForwardOptions { bn: BnMode::Train, gates, bn_momentum: BN_MOMENTUM }
    }

    pub fn eval() -> Self {
        ForwardOptions { bn: BnMode::Eval, gates: GateMode::Decisions, bn_momentum: BN_MOMENTUM }
    }
}

struct BnUpdate {
    params: BnParams,
    saved: BnSaved,
    count: usize,
}

impl SearchableNetwork {
    /// Logits for a batch. In train mode, batch-norm running statistics are
    /// updated with `opts.bn_momentum`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, opts: ForwardOptions) -> crate::Result<Var> {
        let mut updates = Vec::new();
        let out = self.forward_impl(g, x, opts, &mut updates)?;
        self.commit_bn_updates(updates, opts.bn_momentum);
        Ok(out)
    }

    /// Forward pass that leaves running statistics untouched.
    pub fn forward_frozen_stats(&self, g: &mut Graph, x: Var, opts: ForwardOptions) -> crate::Result<Var> {
        self.forward_impl(g, x, opts, &mut Vec::new())
    }

    /// Eval-mode logits with gate decisions applied.
    pub fn predict(&self, images: &Tensor) -> crate::Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward_impl(&mut g, x, ForwardOptions::eval(), &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

    /// Output of searchable layer `index` given its input and, when the layer
    /// has an identity connection, the source layer's output.
    pub fn layer_forward(
        &mut self,
        g: &mut Graph,
        index: usize,
        x_prev: Var,
        x_skip: Option<Var>,
        opts: ForwardOptions,
    ) -> crate::Result<Var> {
        let mut updates = Vec::new();
        let out = self.layer_forward_impl(g, index, x_prev, x_skip, opts, &mut updates)?;
        self.commit_bn_updates(updates, opts.bn_momentum);
        Ok(out)
    }

    fn commit_bn_updates(&mut self, updates: Vec<BnUpdate>, momentum: f32) {
        for u in updates {
            let mut stats = RunningStats {
                mean: self.params.get(u.params.running_mean).data().to_vec(),
                var: self.params.get(u.params.running_var).data().to_vec(),
            };
            kernels::norm_update_running(&mut stats, &u.saved, u.count, momentum);
            self.params.get_mut(u.params.running_mean).data_mut().copy_from_slice(&stats.mean);
            self.params.get_mut(u.params.running_var).data_mut().copy_from_slice(&stats.var);
        }
    }

    fn forward_impl(&self, g: &mut Graph, x: Var, opts: ForwardOptions, updates: &mut Vec<BnUpdate>) -> crate::Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(config_err!("network expects input {:?}, got {:?}", self.spec.input, [c, h, w]));
        }
        let mut cur = x;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.num_layers());
        for stage in &self.stages {
            cur = match stage {
                Stage::MaxPool => g.max_pool2(cur)?,
                Stage::Layer(layer) => {
                    let skip = layer.skip_source.map(|s| outputs[s]);
                    let out = self.layer_forward_impl(g, layer.index, cur, skip, opts, updates)?;
                    outputs.push(out);
                    out
                }
            };
        }
        let pooled = g.global_avg_pool(cur)?;
        let w = g.param(&self.params, self.head.weight);
        let b = g.param(&self.params, self.head.bias);
        g.linear(pooled, w, Some(b))
    }

    /// `(mask, feature_scale, gate id for gradients)` of a gate vector.
    fn gate_inputs(&self, id: crate::gating::GateVecId, mode: GateMode) -> (Vec<f32>, Vec<f32>, Option<crate::gating::GateVecId>) {
        let v = self.gates.get(id);
        match mode {
            GateMode::Open => (vec![1.0; v.len()], vec![1.0; v.len()], None),
            GateMode::Decisions => (v.mask(), v.mask(), None),
            GateMode::Learn if self.gates_frozen => (v.mask(), v.mask(), None),
            GateMode::Learn => {
                let scale = match self.spec.gate_gradient {
                    GateGradient::BinaryMask => v.mask(),
                    GateGradient::Surrogate => v.surrogates(),
                };
                (v.mask(), scale, Some(id))
            }
        }
    }

    fn layer_forward_impl(
        &self,
        g: &mut Graph,
        index: usize,
        x_prev: Var,
        x_skip: Option<Var>,
        opts: ForwardOptions,
        updates: &mut Vec<BnUpdate>,
    ) -> crate::Result<Var> {
        let layer = self.layer(index);
        let (_, c_in, _, _) = g.value(x_prev).dims4()?;
        if c_in != layer.in_channels {
            return Err(config_err!("layer {index} expects {} input channels, got {c_in}", layer.in_channels));
        }
        if x_skip.is_some() != layer.skip_source.is_some() {
            return Err(config_err!("layer {index}: identity input must be given exactly when the layer has a skip source"));
        }

        let mut input = x_prev;
        if let Some(r) = &layer.reducer {
            let w = g.param(&self.params, r.weight);
            let b = g.param(&self.params, r.bias);
            let conv = g.conv2d(input, w, Some(b), 1, 0, 1)?;
            let (mask, scale, id) = self.gate_inputs(r.gates, opts.gates);
            input = g.channel_gate(conv, &mask, scale, id)?;
        }

        let mut stem_out = Vec::with_capacity(layer.stems.len());
        for stem in &layer.stems {
            let groups = if stem.conv_type == ConvType::Depthwise { layer.in_channels } else { 1 };
            let w = g.param(&self.params, stem.weight);
            let b = g.param(&self.params, stem.bias);
            let mut y = g.conv2d(input, w, Some(b), stem.stride, stem.padding(), groups)?;
            if let Some(bn) = stem.bn {
                let gamma = g.param(&self.params, bn.gamma);
                let beta = g.param(&self.params, bn.beta);
                y = match opts.bn {
                    BnMode::Train => {
                        let (n, _, h, w) = g.value(y).dims4()?;
                        let (out, saved) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                        updates.push(BnUpdate { params: bn, saved, count: n * h * w });
                        out
                    }
                    BnMode::Eval => {
                        let stats = RunningStats {
                            mean: self.params.get(bn.running_mean).data().to_vec(),
                            var: self.params.get(bn.running_var).data().to_vec(),
                        };
                        g.batch_norm_eval(y, gamma, beta, &stats, BN_EPS)?
                    }
                };
            }
            stem_out.push(y);
        }

        let mut acc: Option<Var> = None;
        for op in &layer.operations {
            let base = stem_out[op.stem];
            let a = match op.activation {
                Activation::None => base,
                Activation::Relu => g.activation(base, ActivationKind::Relu),
                Activation::Tanh => g.activation(base, ActivationKind::Tanh),
                Activation::Prelu => {
                    let slope = g.param(&self.params, op.prelu.expect("prelu operations own a slope"));
                    g.prelu(base, slope)?
                }
            };
            let (mask, scale, id) = self.gate_inputs(op.gates, opts.gates);
            let masked = g.channel_gate(a, &mask, scale, id)?;
            acc = Some(match acc {
                None => masked,
                Some(prev) => g.add(prev, masked)?,
            });
        }
        let sum = acc.expect("layers have at least one operation");
        let mut out = g.scale(sum, 1.0 / layer.num_operations() as f32);
        if let Some(skip) = x_skip {
            out = g.add(out, skip)?;
        }
        Ok(out)
    }

    /// Folds a backward pass into parameter and (unless frozen) gate gradients.
    pub fn apply_gradients(&mut self, grads: &Gradients) {
        for (&id, grad) in &grads.params {
            if self.params.param(id).trainable {
                self.params.accumulate_grad(id, grad);
            }
        }
        if !self.gates_frozen {
            for (&id, upstream) in &grads.gates {
                self.gates.get_mut(id).accumulate_mask_grad(upstream);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
        self.gates.zero_grads();
    }
}
