//! The searchable supernet.
//!
//! Each searchable layer owns one or more conv(+BN) *stems* and a list of
//! *operations*; an operation is a stem followed by an activation, so
//! activation variants of one convolution share its stem. Every operation
//! has a gate vector over the layer's output channels. The layer output is
//! the sum of the masked operation outputs divided by the (fixed) number of
//! operations, plus an optional identity connection from an earlier layer.

mod build;
mod forward;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::config_err;
use crate::gating::{GateStore, GateVecId};
use crate::params::{ParamId, ParamStore};
use crate::Error;

pub use forward::{ForwardOptions, GateMode};

/// Kernel sizes a candidate convolution may use.
pub const ALLOWED_KERNELS: [usize; 6] = [1, 3, 5, 7, 9, 11];

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConvType {
    Normal,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Activation {
    Relu,
    Prelu,
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    Batch,
    None,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl $ty {
            pub fn keyword(&self) -> &'static str {
                match self { $($ty::$variant => $kw),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.keyword())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    other => Err(config_err!(
                        concat!("unknown ", $what, " `{}` (expected one of: ", $($kw, " "),+, ")"),
                        other
                    )),
                }
            }
        }
    };
}

keyword_enum!(ConvType, "convolution type", { Normal => "normal", Depthwise => "depthwise" });
keyword_enum!(Activation, "activation", { Relu => "relu", Prelu => "prelu", Tanh => "tanh", None => "none" });
keyword_enum!(Norm, "normalization", { Batch => "bn", None => "none" });
keyword_enum!(Backbone, "backbone", { PlainCnn => "plain-cnn", Vgg16Cifar => "vgg16-cifar" });
keyword_enum!(GateGradient, "gate gradient variant", { BinaryMask => "binary-mask", Surrogate => "surrogate" });

/// One candidate operation: convolution, normalization, activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OperationSpec {
    pub conv_type: ConvType,
    pub kernel: usize,
    pub norm: Norm,
    pub activation: Activation,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// conv32, pool, conv64, pool, conv128, conv128, global pool, linear.
    PlainCnn,
    /// The 13-conv CIFAR VGG-16 used for channel slimming, with a 512-wide linear head.
    Vgg16Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneItem {
    Conv(usize),
    MaxPool,
}

impl Backbone {
    pub fn layout(&self) -> Vec<BackboneItem> {
        use BackboneItem::{Conv, MaxPool};
        match self {
            Backbone::PlainCnn => alloc::vec![Conv(32), MaxPool, Conv(64), MaxPool, Conv(128), Conv(128)],
            Backbone::Vgg16Cifar => alloc::vec![
                Conv(64), Conv(64), MaxPool,
                Conv(128), Conv(128), MaxPool,
                Conv(256), Conv(256), Conv(256), MaxPool,
                Conv(512), Conv(512), Conv(512), MaxPool,
                Conv(512), Conv(512), Conv(512),
            ],
        }
    }
}

/// How the gradient reaching the gated feature map is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum GateGradient {
    /// Multiply by the binary mask, as in the forward pass.
    #[default]
    BinaryMask,
    /// Multiply by the gate's softmax probability.
    Surrogate,
}

/// Everything needed to build a [`SearchableNetwork`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub backbone: Backbone,
    /// `(C, H, W)` of one input image.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub conv_types: Vec<ConvType>,
    pub kernels: Vec<usize>,
    pub activations: Vec<Activation>,
    pub norm: Norm,
    /// Identity connections `(from, to)` between searchable layer indices.
    pub skips: Vec<(usize, usize)>,
    /// Insert a gated 1x1 convolution after every identity connection.
    pub reducers: bool,
    pub gate_gradient: GateGradient,
    /// Replaces the backbone preset's layer layout when set.
    pub custom_layout: Option<Vec<BackboneItem>>,
}

impl NetworkSpec {
    pub fn layout(&self) -> Vec<BackboneItem> {
        self.custom_layout.clone().unwrap_or_else(|| self.backbone.layout())
    }

    pub fn new(backbone: Backbone, input: [usize; 3], num_classes: usize) -> Self {
        NetworkSpec {
            backbone,
            input,
            num_classes,
            conv_types: alloc::vec![ConvType::Normal],
            kernels: alloc::vec![3],
            activations: alloc::vec![Activation::Relu],
            norm: Norm::Batch,
            skips: Vec::new(),
            reducers: true,
            gate_gradient: GateGradient::BinaryMask,
            custom_layout: None,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.conv_types.is_empty() {
            return Err(config_err!("candidate convolution types must not be empty"));
        }
        if self.kernels.is_empty() {
            return Err(config_err!("candidate kernels must not be empty"));
        }
        if self.activations.is_empty() {
            return Err(config_err!("candidate activations must not be empty"));
        }
        for &k in &self.kernels {
            if !ALLOWED_KERNELS.contains(&k) {
                return Err(config_err!("kernel must be one of 1,3,5,7,9,11 (got {k})"));
            }
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(config_err!("input shape {:?} has an empty dimension", self.input));
        }
        let layout = self.layout();
        if !layout.iter().any(|i| matches!(i, BackboneItem::Conv(_))) {
            return Err(config_err!("the layout needs at least one convolution layer"));
        }
        if layout.iter().any(|i| matches!(i, BackboneItem::Conv(0))) {
            return Err(config_err!("convolution layers need at least one channel"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// Batch-norm parameters and running statistics of a stem.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// A convolution (plus optional batch norm) shared by one or more operations.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv_type: ConvType,
    pub kernel: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BnParams>,
}

impl Stem {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug)]
pub struct Operation {
    /// Index into the layer's stems.
    pub stem: usize,
    pub activation: Activation,
    pub prelu: Option<ParamId>,
    pub gates: GateVecId,
}

/// Gated 1x1 convolution applied to a layer's input when that input is the
/// sum of an identity connection.
#[derive(Clone, Debug)]
pub struct Reducer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gates: GateVecId,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct SearchableLayer {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial size of the layer input.
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub stems: Vec<Stem>,
    pub operations: Vec<Operation>,
    pub skip_source: Option<usize>,
    pub reducer: Option<Reducer>,
}

impl SearchableLayer {
    /// Number of candidate operations, the fixed divisor of the layer average.
    pub fn num_operations(&self) -> usize {
        self.operations.len()
    }

    pub fn operation_spec(&self, op: usize) -> OperationSpec {
        let o = &self.operations[op];
        let s = &self.stems[o.stem];
        OperationSpec {
            conv_type: s.conv_type,
            kernel: s.kernel,
            norm: if s.bn.is_some() { Norm::Batch } else { Norm::None },
            activation: o.activation,
            stride: s.stride,
        }
    }

    /// log2 of the number of mask patterns of this layer, `M * C`.
    pub fn search_space_log2(&self) -> u64 {
        (self.operations.len() * self.out_channels) as u64
    }
}

#[derive(Clone, Debug)]
pub enum Stage {
    Layer(SearchableLayer),
    MaxPool,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug)]
pub struct SearchableNetwork {
    spec: NetworkSpec,
    stages: Vec<Stage>,
    layer_stage: Vec<usize>,
    head: Head,
    pub params: ParamStore,
    pub gates: GateStore,
    gates_frozen: bool,
}

impl SearchableNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn num_layers(&self) -> usize {
        self.layer_stage.len()
    }

    pub fn layer(&self, index: usize) -> &SearchableLayer {
        match &self.stages[self.layer_stage[index]] {
            Stage::Layer(l) => l,
            Stage::MaxPool => unreachable!("layer_stage only points at layers"),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &SearchableLayer> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Layer(l) => Some(l),
            Stage::MaxPool => None,
        })
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Excludes gates from the objective: decisions become constants.
    pub fn freeze_gates(&mut self) {
        self.gates_frozen = true;
    }

    pub fn unfreeze_gates(&mut self) {
        self.gates_frozen = false;
    }

    pub fn gates_frozen(&self) -> bool {
        self.gates_frozen
    }

    /// Gate vectors whose union gives the active channels of layer `index`'s
    /// output, following identity connections back to their sources.
    pub fn output_gate_vectors(&self, index: usize) -> Vec<GateVecId> {
        let layer = self.layer(index);
        let mut ids: Vec<GateVecId> = layer.operations.iter().map(|o| o.gates).collect();
        if let Some(src) = layer.skip_source {
            for id in self.output_gate_vectors(src) {
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
        }
        ids
    }

    /// Number of open gates over all gate vectors.
    pub fn open_gates(&self) -> usize {
        self.gates.iter().map(|(_, v)| v.gates.iter().filter(|g| g.decision()).count()).sum()
    }

    /// Active output channels per searchable layer.
    pub fn active_channels(&self) -> Vec<usize> {
        (0..self.num_layers())
            .map(|l| {
                let ids = self.output_gate_vectors(l);
                let vs: Vec<_> = ids.iter().map(|&id| self.gates.get(id)).collect();
                crate::gating::union_active(&vs).len()
            })
            .collect()
    }

    /// Sets every gate of every vector from `pattern(vector, channel)`.
    pub fn set_gate_pattern(&mut self, mut pattern: impl FnMut(GateVecId, usize) -> bool) {
        let ids: Vec<GateVecId> = self.gates.iter().map(|(id, _)| id).collect();
        for id in ids {
            for (c, g) in self.gates.get_mut(id).gates.iter_mut().enumerate() {
                let open = pattern(id, c);
                g.psi_on = if open { 1.0 } else { 0.0 };
                g.psi_off = if open { 0.0 } else { 1.0 };
            }
        }
    }

    /// Gate logits as named arrays `[psi_on..., psi_off...]`.
    pub fn export_gates(&self) -> Vec<(String, Vec<f32>)> {
        self.gates
            .iter()
            .map(|(id, v)| {
                let mut data: Vec<f32> = v.gates.iter().map(|g| g.psi_on).collect();
                data.extend(v.gates.iter().map(|g| g.psi_off));
                (self.gate_name(id), data)
            })
            .collect()
    }

    pub fn import_gates(&mut self, arrays: &[(String, Vec<f32>)]) -> crate::Result<()> {
        let ids: Vec<GateVecId> = self.gates.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = self.gate_name(id);
            let data = arrays
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, d)| d)
                .ok_or_else(|| Error::State(alloc::format!("missing gate vector {name}")))?;
            let v = self.gates.get_mut(id);
            if data.len() != 2 * v.len() {
                return Err(Error::State(alloc::format!("gate vector {name} has wrong length")));
            }
            let n = v.len();
            for (c, g) in v.gates.iter_mut().enumerate() {
                g.psi_on = data[c];
                g.psi_off = data[n + c];
            }
        }
        Ok(())
    }

    pub fn export_params(&self) -> Vec<(String, Vec<f32>)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec())).collect()
    }

    pub fn import_params(&mut self, arrays: &[(String, Vec<f32>)]) -> crate::Result<()> {
        for (_, p) in self.params.iter_mut() {
            let data = arrays
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|(_, d)| d)
                .ok_or_else(|| Error::State(alloc::format!("missing parameter {}", p.name)))?;
            if data.len() != p.tensor.numel() {
                return Err(Error::State(alloc::format!("parameter {} has wrong length", p.name)));
            }
            p.tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    fn gate_name(&self, id: GateVecId) -> String {
        let owner = self.gates.get(id).owner;
        if owner.op == crate::gating::GateOwner::REDUCER {
            alloc::format!("layer{}.reducer.gates", owner.layer)
        } else {
            alloc::format!("layer{}.op{}.gates", owner.layer, owner.op)
        }
    }
}
