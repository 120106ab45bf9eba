//! Parameter, FLOP and latency accounting, latency-profile fitting and the
//! differentiable resource regularizer.
//!
//! Every cost is a polynomial `cross·c_in·c_out + in·c_in + out·c_out + constant`
//! in the input and output channel counts of a [`CostUnit`]. Convolution and
//! batch-norm costs attach to a stem and use the union of the channels of the
//! operations sharing it, PReLU slopes attach to their operation. The same
//! units evaluated at retained channel counts give [`resource_report`], so
//! the regularizer and the report agree exactly for any gate pattern.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::compile::{ArchitectureDescriptor, StageDesc};
use crate::error::config_err;
use crate::gating::{gate_backward, GateStore, GateVecId};
use crate::network::{Activation, ConvType, SearchableNetwork, Stage};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Default λ per resource kind, in loss per parameter, per FLOP and per millisecond.
pub const DEFAULT_LAMBDA_PARAMETERS: f64 = 1e-7;
pub const DEFAULT_LAMBDA_FLOPS: f64 = 1e-9;
pub const DEFAULT_LAMBDA_LATENCY: f64 = 0.0012;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResourceKind {
    Parameters,
    Flops,
    Latency,
}

impl ResourceKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            ResourceKind::Parameters => "parameters",
            ResourceKind::Flops => "flops",
            ResourceKind::Latency => "latency",
        }
    }

    pub fn default_lambda(&self) -> f64 {
        match self {
            ResourceKind::Parameters => DEFAULT_LAMBDA_PARAMETERS,
            ResourceKind::Flops => DEFAULT_LAMBDA_FLOPS,
            ResourceKind::Latency => DEFAULT_LAMBDA_LATENCY,
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for ResourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameters" => Ok(ResourceKind::Parameters),
            "flops" => Ok(ResourceKind::Flops),
            "latency" => Ok(ResourceKind::Latency),
            _ => Err(config_err!("unknown resource kind '{s}' (expected parameters, flops or latency)")),
        }
    }
}

/// Layer condition under which latency is affine in FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConditionKey {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H={} W={} k={} stride={} groups={}", self.height, self.width, self.kernel, self.stride, self.groups)
    }
}

/// Static geometry of one costed block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostShape {
    Conv {
        conv_type: ConvType,
        kernel: usize,
        stride: usize,
        batch_norm: bool,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        /// Dense group count, used only as part of the latency condition.
        groups: usize,
    },
    /// One learnable slope per output channel, no FLOPs.
    Prelu,
    Linear,
}

/// `cross·c_in·c_out + input·c_in + output·c_out + constant`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Poly {
    pub cross: f64,
    pub input: f64,
    pub output: f64,
    pub constant: f64,
}

impl Poly {
    pub fn eval(&self, c_in: f64, c_out: f64) -> f64 {
        self.cross * c_in * c_out + self.input * c_in + self.output * c_out + self.constant
    }

    /// `(d/dc_in, d/dc_out)`.
    pub fn grad(&self, c_in: f64, c_out: f64) -> (f64, f64) {
        (self.cross * c_out + self.input, self.cross * c_in + self.output)
    }

    fn scaled(self, a: f64) -> Poly {
        Poly { cross: a * self.cross, input: a * self.input, output: a * self.output, constant: a * self.constant }
    }
}

impl CostShape {
    pub fn params_poly(&self) -> Poly {
        match *self {
            CostShape::Conv { conv_type, kernel, batch_norm, .. } => {
                let kk = (kernel * kernel) as f64;
                let per_out = 1.0 + if batch_norm { 2.0 } else { 0.0 };
                match conv_type {
                    ConvType::Normal => Poly { cross: kk, output: per_out, ..Poly::default() },
                    ConvType::Depthwise => Poly { output: kk + per_out, ..Poly::default() },
                }
            }
            CostShape::Prelu => Poly { output: 1.0, ..Poly::default() },
            CostShape::Linear => Poly { cross: 1.0, output: 1.0, ..Poly::default() },
        }
    }

    pub fn flops_poly(&self) -> Poly {
        match *self {
            CostShape::Conv { conv_type, kernel, out_hw, .. } => {
                let per = 2.0 * (kernel * kernel * out_hw.0 * out_hw.1) as f64;
                match conv_type {
                    ConvType::Normal => Poly { cross: per, ..Poly::default() },
                    ConvType::Depthwise => Poly { output: per, ..Poly::default() },
                }
            }
            CostShape::Prelu => Poly::default(),
            CostShape::Linear => Poly { cross: 2.0, ..Poly::default() },
        }
    }

    pub fn condition(&self) -> Option<ConditionKey> {
        match *self {
            CostShape::Conv { kernel, stride, in_hw, groups, .. } => {
                Some(ConditionKey { height: in_hw.0, width: in_hw.1, kernel, stride, groups })
            }
            _ => None,
        }
    }
}

pub fn phi_params(shape: &CostShape, c_in: f64, c_out: f64) -> f64 {
    shape.params_poly().eval(c_in, c_out)
}

pub fn phi_flops(shape: &CostShape, c_in: f64, c_out: f64) -> f64 {
    shape.flops_poly().eval(c_in, c_out)
}

/// A channel count entering a cost polynomial.
#[derive(Clone, Debug, PartialEq)]
pub enum Count {
    Static(f64),
    /// Union of open channels over gate vectors.
    Gates(Vec<GateVecId>),
}

/// One costed block of the supernet.
#[derive(Clone, Debug, PartialEq)]
pub struct CostUnit {
    pub layer: usize,
    pub shape: CostShape,
    pub c_in: Count,
    pub c_out: Count,
    /// Candidate operations whose latency intercept is charged to this unit.
    pub operations: usize,
}

/// Cost units of the searchable layers (the classifier head is not included).
pub fn cost_units(net: &SearchableNetwork) -> Vec<CostUnit> {
    let mut units = Vec::new();
    let mut prev = Count::Static(net.spec().input[0] as f64);
    for stage in net.stages() {
        let Stage::Layer(layer) = stage else { continue };
        let mut stem_in = prev.clone();
        if let Some(r) = &layer.reducer {
            units.push(CostUnit {
                layer: layer.index,
                shape: CostShape::Conv {
                    conv_type: ConvType::Normal,
                    kernel: 1,
                    stride: 1,
                    batch_norm: false,
                    in_hw: layer.in_hw,
                    out_hw: layer.in_hw,
                    groups: 1,
                },
                c_in: prev.clone(),
                c_out: Count::Gates(vec![r.gates]),
                operations: 1,
            });
            stem_in = Count::Gates(vec![r.gates]);
        }
        for (s, stem) in layer.stems.iter().enumerate() {
            let ops: Vec<_> = layer.operations.iter().filter(|o| o.stem == s).collect();
            units.push(CostUnit {
                layer: layer.index,
                shape: CostShape::Conv {
                    conv_type: stem.conv_type,
                    kernel: stem.kernel,
                    stride: stem.stride,
                    batch_norm: stem.bn.is_some(),
                    in_hw: layer.in_hw,
                    out_hw: layer.out_hw,
                    groups: if stem.conv_type == ConvType::Depthwise { layer.in_channels } else { 1 },
                },
                c_in: stem_in.clone(),
                c_out: Count::Gates(ops.iter().map(|o| o.gates).collect()),
                operations: ops.len(),
            });
            for op in ops.iter().filter(|o| o.activation == Activation::Prelu) {
                units.push(CostUnit {
                    layer: layer.index,
                    shape: CostShape::Prelu,
                    c_in: stem_in.clone(),
                    c_out: Count::Gates(vec![op.gates]),
                    operations: 0,
                });
            }
        }
        prev = Count::Gates(net.output_gate_vectors(layer.index));
    }
    units
}

/// Latency conditions a profile must cover for `net`.
pub fn required_conditions(net: &SearchableNetwork) -> Vec<ConditionKey> {
    let mut keys: Vec<ConditionKey> = cost_units(net).iter().filter_map(|u| u.shape.condition()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Fitted `latency_ms = a·flops + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
}

impl AffineFit {
    pub fn predict(&self, flops: f64) -> f64 {
        self.a * flops + self.b
    }
}

/// Measured `(flops, latency_ms)` samples grouped by condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyProfile {
    pub samples: BTreeMap<ConditionKey, Vec<(f64, f64)>>,
}

/// Per-condition affine fits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyModel {
    pub fits: BTreeMap<ConditionKey, AffineFit>,
    /// Conditions whose least-squares slope was negative and clamped to 0.
    pub clamped: Vec<ConditionKey>,
}

impl LatencyProfile {
    pub fn push(&mut self, key: ConditionKey, flops: f64, latency_ms: f64) {
        self.samples.entry(key).or_default().push((flops, latency_ms));
    }

    /// Ordinary least squares per condition.
    pub fn fit(&self) -> Result<LatencyModel> {
        let mut model = LatencyModel::default();
        for (key, samples) in &self.samples {
            if samples.len() < 2 {
                return Err(Error::Fit(format!("condition {key} has {} sample(s), need at least 2", samples.len())));
            }
            let n = samples.len() as f64;
            let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
            let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
            let sxx: f64 = samples.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum();
            let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
            if sxx <= 0.0 || !sxx.is_finite() {
                return Err(Error::Fit(format!("condition {key} has constant FLOPs, slope is undetermined")));
            }
            let mut a = sxy / sxx;
            if a < 0.0 {
                log::warn!("negative latency slope {a:e} for condition {key} clamped to 0");
                model.clamped.push(*key);
                a = 0.0;
            }
            model.fits.insert(*key, AffineFit { a, b: my - a * mx });
        }
        Ok(model)
    }
}

impl LatencyModel {
    pub fn get(&self, key: &ConditionKey) -> Result<AffineFit> {
        self.fits
            .get(key)
            .copied()
            .ok_or_else(|| Error::Coverage(format!("latency profile has no fit for condition {key}")))
    }
}

/// Noisy samples of `a·flops + b` for each condition, flops spread uniformly
/// over `[flops_lo, flops_hi]`, noise standard deviation `noise` times the
/// latency range.
pub fn synthetic_profile(
    truth: &BTreeMap<ConditionKey, AffineFit>,
    samples: usize,
    flops_range: (f64, f64),
    noise: f64,
    rng: &mut Rng,
) -> LatencyProfile {
    let mut profile = LatencyProfile::default();
    let (lo, hi) = flops_range;
    for (key, fit) in truth {
        let range = (fit.predict(hi) - fit.predict(lo)).abs();
        for i in 0..samples {
            let flops = lo + (hi - lo) * i as f64 / (samples.max(2) - 1) as f64;
            let eps = noise * range * rng::normal(rng) as f64;
            profile.push(*key, flops, fit.predict(flops) + eps);
        }
    }
    profile
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerState {
    pub lambda: f64,
    pub kind: ResourceKind,
    pub target: f64,
}

impl RegularizerState {
    pub fn new(kind: ResourceKind, lambda: f64, target: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(config_err!("lambda must be a finite value >= 0 (got {lambda})"));
        }
        if !(target > 0.0) {
            return Err(config_err!("target resource must be > 0 (got {target})"));
        }
        Ok(RegularizerState { lambda, kind, target })
    }
}

/// How gate-dependent channel counts are evaluated in the forward value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Binary decisions, union through the hard `h` (the training path).
    Binary,
    /// Sum of surrogate probabilities; `h` is the identity. Its exact
    /// derivative is what the backward pass computes.
    Relaxed,
}

fn count_value(count: &Count, gates: &GateStore, mode: CountMode) -> f64 {
    match count {
        Count::Static(c) => *c,
        Count::Gates(ids) => match mode {
            CountMode::Binary => {
                let vs: Vec<_> = ids.iter().map(|&id| gates.get(id)).collect();
                crate::gating::union_active(&vs).len() as f64
            }
            CountMode::Relaxed => ids
                .iter()
                .flat_map(|&id| gates.get(id).gates.iter())
                .map(|g| g.surrogate())
                .sum(),
        },
    }
}

fn unit_poly(unit: &CostUnit, kind: ResourceKind, model: Option<&LatencyModel>) -> Result<Poly> {
    Ok(match kind {
        ResourceKind::Parameters => unit.shape.params_poly(),
        ResourceKind::Flops => unit.shape.flops_poly(),
        ResourceKind::Latency => match unit.shape.condition() {
            Some(key) => {
                let model = model.ok_or_else(|| Error::Coverage(String::from("latency kind needs a latency profile")))?;
                let fit = model.get(&key)?;
                let mut p = unit.shape.flops_poly().scaled(fit.a);
                p.constant += fit.b * unit.operations as f64;
                p
            }
            None => Poly::default(),
        },
    })
}

/// Value of `R(psi)` and its gradient `(d/dpsi_on, d/dpsi_off)` per gate.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerEval {
    pub value: f64,
    pub grads: BTreeMap<GateVecId, Vec<(f64, f64)>>,
}

/// Evaluates `R(psi)` with its gradient, without touching the network.
pub fn regularizer_eval(
    net: &SearchableNetwork,
    kind: ResourceKind,
    model: Option<&LatencyModel>,
    mode: CountMode,
) -> Result<RegularizerEval> {
    let mut value = 0.0;
    let mut upstream: BTreeMap<GateVecId, f64> = BTreeMap::new();
    for unit in cost_units(net) {
        let poly = unit_poly(&unit, kind, model)?;
        let c_in = count_value(&unit.c_in, &net.gates, mode);
        let c_out = count_value(&unit.c_out, &net.gates, mode);
        value += poly.eval(c_in, c_out);
        let (d_in, d_out) = poly.grad(c_in, c_out);
        for (count, d) in [(&unit.c_in, d_in), (&unit.c_out, d_out)] {
            if let Count::Gates(ids) = count {
                for &id in ids {
                    *upstream.entry(id).or_default() += d;
                }
            }
        }
    }
    let grads = upstream
        .into_iter()
        .map(|(id, u)| (id, net.gates.get(id).gates.iter().map(|g| gate_backward(g, u)).collect()))
        .collect();
    Ok(RegularizerEval { value, grads })
}

/// Binary-count `R(psi)`; adds `lambda·dR/dpsi` to the gate gradients unless
/// gates are frozen or `lambda` is 0.
pub fn regularizer(net: &mut SearchableNetwork, state: &RegularizerState, model: Option<&LatencyModel>) -> Result<f64> {
    let eval = regularizer_eval(net, state.kind, model, CountMode::Binary)?;
    if state.lambda > 0.0 && !net.gates_frozen() {
        for (id, grads) in &eval.grads {
            for (g, &(on, off)) in net.gates.get_mut(*id).gates.iter_mut().zip(grads) {
                g.grad_on += (state.lambda * on) as f32;
                g.grad_off += (state.lambda * off) as f32;
            }
        }
    }
    Ok(eval.value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResourceReport {
    pub parameters: u64,
    pub flops: u64,
    /// Present when a latency model was supplied.
    pub predicted_latency_ms: Option<f64>,
}

impl ResourceReport {
    pub fn get(&self, kind: ResourceKind) -> Option<f64> {
        match kind {
            ResourceKind::Parameters => Some(self.parameters as f64),
            ResourceKind::Flops => Some(self.flops as f64),
            ResourceKind::Latency => self.predicted_latency_ms,
        }
    }
}

/// Exact resources of the searchable layers of a pruned architecture.
pub fn resource_report(arch: &ArchitectureDescriptor, model: Option<&LatencyModel>) -> Result<ResourceReport> {
    let mut params = 0.0;
    let mut flops = 0.0;
    let mut latency = 0.0;
    let mut add = |shape: CostShape, c_in: usize, c_out: usize, ops: usize| -> Result<()> {
        let (ci, co) = (c_in as f64, c_out as f64);
        params += phi_params(&shape, ci, co);
        let f = phi_flops(&shape, ci, co);
        flops += f;
        if let (Some(m), Some(key)) = (model, shape.condition()) {
            let fit = m.get(&key)?;
            latency += fit.a * f + fit.b * ops as f64;
        }
        Ok(())
    };
    let mut prev = arch.input[0];
    for stage in &arch.stages {
        let StageDesc::Layer(l) = stage else { continue };
        let mut stem_in = prev;
        if let Some(r) = &l.reducer {
            let shape = CostShape::Conv {
                conv_type: ConvType::Normal,
                kernel: 1,
                stride: 1,
                batch_norm: false,
                in_hw: l.in_hw,
                out_hw: l.in_hw,
                groups: 1,
            };
            add(shape, prev, r.channels.len(), 1)?;
            stem_in = r.channels.len();
        }
        for (s, stem) in l.stems.iter().enumerate() {
            let ops: Vec<_> = l.operations.iter().filter(|o| o.stem == s).collect();
            let shape = CostShape::Conv {
                conv_type: stem.conv_type,
                kernel: stem.kernel,
                stride: stem.stride,
                batch_norm: stem.batch_norm,
                in_hw: l.in_hw,
                out_hw: l.out_hw,
                groups: if stem.conv_type == ConvType::Depthwise { l.in_channels } else { 1 },
            };
            add(shape, stem_in, stem.channels.len(), ops.len())?;
            for op in ops.iter().filter(|o| o.activation == Activation::Prelu) {
                add(CostShape::Prelu, stem_in, op.channels.len(), 0)?;
            }
        }
        prev = l.channels.len();
    }
    Ok(ResourceReport {
        parameters: params as u64,
        flops: flops as u64,
        predicted_latency_ms: model.map(|_| latency),
    })
}
