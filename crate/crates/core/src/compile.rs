//! Extraction of the pruned network implied by the current gate decisions.
//!
//! [`describe`] produces the weight-free [`ArchitectureDescriptor`]: which
//! operations, stems and channel indices survive in every layer. [`compile`]
//! additionally slices all weights so the result runs on its own. The layer
//! average keeps dividing by the original number of candidate operations,
//! so the compiled network reproduces the masked supernet's eval output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::gating::union_active;
use crate::kernels::{self, ActivationKind, RunningStats};
use crate::network::{Activation, ConvType, SearchableNetwork, Stage, BN_EPS};
use crate::params::ParamId;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReducerDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Retained output channels.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemDesc {
    pub conv_type: ConvType,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    /// Union of the channels of the operations reading this stem.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperationDesc {
    /// Index into the retained stems of the layer.
    pub stem: usize,
    pub activation: Activation,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// Number of candidate operations in the supernet layer.
    pub divisor: usize,
    pub reducer: Option<ReducerDesc>,
    pub stems: Vec<StemDesc>,
    pub operations: Vec<OperationDesc>,
    pub skip_source: Option<usize>,
    /// Retained output channels: union of operation channels and the skip source.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageDesc {
    Layer(LayerDesc),
    MaxPool,
}

/// Topology and retained channel sets of a pruned network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureDescriptor {
    pub input: [usize; 3],
    pub num_classes: usize,
    pub stages: Vec<StageDesc>,
}

impl ArchitectureDescriptor {
    pub fn layers(&self) -> impl Iterator<Item = &LayerDesc> {
        self.stages.iter().filter_map(|s| match s {
            StageDesc::Layer(l) => Some(l),
            StageDesc::MaxPool => None,
        })
    }

    /// Retained channels feeding the stems of `layer`, given the retained
    /// output channels of the previous stage.
    pub fn stem_input<'a>(layer: &'a LayerDesc, prev: &'a [usize]) -> &'a [usize] {
        layer.reducer.as_ref().map_or(prev, |r| &r.channels)
    }

    /// Retained channels of the final feature map (input of the classifier).
    pub fn head_channels(&self) -> Vec<usize> {
        self.layers().last().map(|l| l.channels.clone()).unwrap_or_else(|| (0..self.input[0]).collect())
    }

    /// Structural checks for descriptors that did not come from [`describe`].
    pub fn validate(&self) -> Result<()> {
        let mut prev_dense = self.input[0];
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut seen: Vec<&LayerDesc> = Vec::new();
        for stage in &self.stages {
            match stage {
                StageDesc::MaxPool => {
                    h /= 2;
                    w /= 2;
                }
                StageDesc::Layer(l) => {
                    let ctx = |msg: String| Error::Wiring(format!("layer {}: {msg}", l.index));
                    if l.index != seen.len() {
                        return Err(ctx(format!("expected layer index {}", seen.len())));
                    }
                    if l.in_channels != prev_dense || l.in_hw != (h, w) || l.out_hw != (h, w) {
                        return Err(ctx(String::from("input geometry does not match the preceding stage")));
                    }
                    check_indices(&l.channels, l.out_channels).map_err(ctx)?;
                    if l.channels.is_empty() {
                        return Err(Error::DeadLayer { layer: l.index });
                    }
                    if let Some(r) = &l.reducer {
                        if r.in_channels != prev_dense {
                            return Err(ctx(String::from("reducer input width differs from the layer input")));
                        }
                        check_indices(&r.channels, r.out_channels).map_err(ctx)?;
                        if r.channels.is_empty() {
                            return Err(Error::DeadLayer { layer: l.index });
                        }
                    }
                    let stem_in = match &l.reducer {
                        Some(r) => r.out_channels,
                        None => prev_dense,
                    };
                    if l.operations.is_empty() && l.skip_source.is_none() {
                        return Err(Error::DeadLayer { layer: l.index });
                    }
                    if l.divisor < l.operations.len() || l.divisor == 0 {
                        return Err(ctx(format!("divisor {} below operation count", l.divisor)));
                    }
                    for s in &l.stems {
                        check_indices(&s.channels, l.out_channels).map_err(ctx)?;
                        if s.conv_type == ConvType::Depthwise && stem_in != l.out_channels {
                            return Err(ctx(String::from("depthwise stem needs equal input and output widths")));
                        }
                    }
                    let mut union = Vec::new();
                    for op in &l.operations {
                        let stem = l.stems.get(op.stem).ok_or_else(|| ctx(format!("operation refers to missing stem {}", op.stem)))?;
                        check_indices(&op.channels, l.out_channels).map_err(ctx)?;
                        if op.channels.iter().any(|c| !stem.channels.contains(c)) {
                            return Err(ctx(String::from("operation channel not produced by its stem")));
                        }
                        union.extend_from_slice(&op.channels);
                    }
                    if let Some(src) = l.skip_source {
                        let source = seen.get(src).ok_or_else(|| ctx(format!("skip source {src} is not an earlier layer")))?;
                        if source.out_channels != l.out_channels || source.out_hw != l.out_hw {
                            return Err(ctx(format!("skip source {src} has a different shape")));
                        }
                        if source.channels.iter().any(|c| !l.channels.contains(c)) {
                            return Err(ctx(format!("channel of skip source {src} was pruned but is still needed")));
                        }
                        union.extend_from_slice(&source.channels);
                    }
                    union.sort_unstable();
                    union.dedup();
                    if union != l.channels {
                        return Err(ctx(String::from("retained channels differ from the union of their producers")));
                    }
                    prev_dense = l.out_channels;
                    seen.push(l);
                }
            }
            if h == 0 || w == 0 {
                return Err(Error::Wiring(String::from("feature map pooled below 1x1")));
            }
        }
        Ok(())
    }
}

fn check_indices(indices: &[usize], bound: usize) -> core::result::Result<(), String> {
    if indices.windows(2).any(|p| p[0] >= p[1]) {
        return Err(String::from("channel indices must be strictly increasing"));
    }
    if indices.last().is_some_and(|&c| c >= bound) {
        return Err(format!("channel index out of range for {bound} channels"));
    }
    Ok(())
}

/// Retained structure of `net` under its current gate decisions.
pub fn describe(net: &SearchableNetwork) -> Result<ArchitectureDescriptor> {
    let mut stages = Vec::new();
    let mut outputs: Vec<Vec<usize>> = Vec::new();
    for stage in net.stages() {
        let layer = match stage {
            Stage::MaxPool => {
                stages.push(StageDesc::MaxPool);
                continue;
            }
            Stage::Layer(l) => l,
        };
        let reducer = layer.reducer.as_ref().map(|r| ReducerDesc {
            in_channels: r.in_channels,
            out_channels: r.out_channels,
            channels: net.gates.get(r.gates).active(),
        });
        if reducer.as_ref().is_some_and(|r| r.channels.is_empty()) {
            return Err(Error::DeadLayer { layer: layer.index });
        }

        let mut stem_map: Vec<Option<usize>> = vec![None; layer.stems.len()];
        let mut stems: Vec<StemDesc> = Vec::new();
        let mut operations = Vec::new();
        for op in &layer.operations {
            let channels = net.gates.get(op.gates).active();
            if channels.is_empty() {
                continue;
            }
            let stem_idx = *stem_map[op.stem].get_or_insert_with(|| {
                let s = &layer.stems[op.stem];
                stems.push(StemDesc {
                    conv_type: s.conv_type,
                    kernel: s.kernel,
                    stride: s.stride,
                    batch_norm: s.bn.is_some(),
                    channels: Vec::new(),
                });
                stems.len() - 1
            });
            let sc = &mut stems[stem_idx].channels;
            sc.extend_from_slice(&channels);
            sc.sort_unstable();
            sc.dedup();
            operations.push(OperationDesc { stem: stem_idx, activation: op.activation, channels });
        }

        let ids = net.output_gate_vectors(layer.index);
        let vectors: Vec<_> = ids.iter().map(|&id| net.gates.get(id)).collect();
        let channels = union_active(&vectors);
        if channels.is_empty() {
            return Err(Error::DeadLayer { layer: layer.index });
        }
        outputs.push(channels.clone());
        stages.push(StageDesc::Layer(LayerDesc {
            index: layer.index,
            in_channels: layer.in_channels,
            out_channels: layer.out_channels,
            in_hw: layer.in_hw,
            out_hw: layer.out_hw,
            divisor: layer.num_operations(),
            reducer,
            stems,
            operations,
            skip_source: layer.skip_source,
            channels,
        }));
    }
    let desc = ArchitectureDescriptor { input: net.spec().input, num_classes: net.spec().num_classes, stages };
    desc.validate()?;
    Ok(desc)
}

#[derive(Clone, Debug)]
struct CompiledBn {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    stats: RunningStats,
}

#[derive(Clone, Debug)]
struct CompiledStem {
    weight: Tensor,
    bias: Vec<f32>,
    bn: Option<CompiledBn>,
}

#[derive(Clone, Debug)]
struct CompiledLayer {
    reducer: Option<(Tensor, Vec<f32>)>,
    stems: Vec<CompiledStem>,
    prelu: Vec<Option<Vec<f32>>>,
}

/// A pruned network that runs without the supernet.
#[derive(Clone, Debug)]
pub struct CompiledArchitecture {
    descriptor: ArchitectureDescriptor,
    layers: Vec<CompiledLayer>,
    head_weight: Tensor,
    head_bias: Vec<f32>,
}

fn position(set: &[usize], c: usize) -> Option<usize> {
    set.binary_search(&c).ok()
}

/// Slices rows `out` and input columns `inp` of a `(C_out, C_in, k, k)` weight.
fn slice_conv(w: &Tensor, out: &[usize], inp: Option<&[usize]>) -> Result<Tensor> {
    let (_, c_in, k, _) = w.dims4()?;
    let kk = k * k;
    let cols: Vec<usize> = inp.map_or_else(|| (0..c_in).collect(), |i| i.to_vec());
    let mut data = Vec::with_capacity(out.len() * cols.len() * kk);
    for &o in out {
        for &i in &cols {
            data.extend_from_slice(&w.data()[(o * c_in + i) * kk..][..kk]);
        }
    }
    Tensor::new(&[out.len(), cols.len(), k, k], data)
}

fn pick(values: &[f32], idx: &[usize]) -> Vec<f32> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Slices the weights of `net` down to the channels that survive its gates.
pub fn compile(net: &SearchableNetwork) -> Result<CompiledArchitecture> {
    let descriptor = describe(net)?;
    let p = &net.params;
    let data = |id: ParamId| p.get(id).data();
    let mut layers = Vec::new();
    let mut prev: Vec<usize> = (0..descriptor.input[0]).collect();
    for (layer, desc) in net.layers().zip(descriptor.layers()) {
        let reducer = match (&layer.reducer, &desc.reducer) {
            (Some(r), Some(rd)) => {
                Some((slice_conv(p.get(r.weight), &rd.channels, Some(&prev))?, pick(data(r.bias), &rd.channels)))
            }
            _ => None,
        };
        let stem_in = ArchitectureDescriptor::stem_input(desc, &prev).to_vec();
        // retained stems in descriptor order, matched back to supernet stems
        let mut source_stem = vec![usize::MAX; desc.stems.len()];
        let mut prelu = Vec::new();
        let mut ops = layer.operations.iter().filter(|o| !net.gates.get(o.gates).active().is_empty());
        for od in &desc.operations {
            let op = ops.next().ok_or_else(|| shape_err!("descriptor/network mismatch in layer {}", desc.index))?;
            source_stem[od.stem] = op.stem;
            prelu.push(op.prelu.map(|id| pick(data(id), &od.channels)));
        }
        let mut stems = Vec::new();
        for (sd, &src) in desc.stems.iter().zip(&source_stem) {
            let s = &layer.stems[src];
            let weight = match sd.conv_type {
                ConvType::Normal => slice_conv(p.get(s.weight), &sd.channels, Some(&stem_in))?,
                ConvType::Depthwise => slice_conv(p.get(s.weight), &sd.channels, None)?,
            };
            let bn = s.bn.map(|bn| CompiledBn {
                gamma: pick(data(bn.gamma), &sd.channels),
                beta: pick(data(bn.beta), &sd.channels),
                stats: RunningStats {
                    mean: pick(data(bn.running_mean), &sd.channels),
                    var: pick(data(bn.running_var), &sd.channels),
                },
            });
            stems.push(CompiledStem { weight, bias: pick(data(s.bias), &sd.channels), bn });
        }
        layers.push(CompiledLayer { reducer, stems, prelu });
        prev = desc.channels.clone();
    }
    let head = net.head();
    let head_in = descriptor.head_channels();
    let full = p.get(head.weight);
    let mut hw = Vec::with_capacity(head.out_features * head_in.len());
    for o in 0..head.out_features {
        hw.extend(head_in.iter().map(|&i| full.data()[o * head.in_features + i]));
    }
    Ok(CompiledArchitecture {
        head_weight: Tensor::new(&[head.out_features, head_in.len()], hw)?,
        head_bias: data(head.bias).to_vec(),
        descriptor,
        layers,
    })
}

impl CompiledArchitecture {
    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    /// Number of stored weights (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let mut n = self.head_weight.numel() + self.head_bias.len();
        for l in &self.layers {
            if let Some((w, b)) = &l.reducer {
                n += w.numel() + b.len();
            }
            for s in &l.stems {
                n += s.weight.numel() + s.bias.len();
                if let Some(bn) = &s.bn {
                    n += bn.gamma.len() + bn.beta.len();
                }
            }
            n += l.prelu.iter().flatten().map(Vec::len).sum::<usize>();
        }
        n
    }

    /// Eval-mode logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = images.dims4()?;
        if [c, h, w] != self.descriptor.input {
            return Err(shape_err!("compiled network expects input {:?}, got {:?}", self.descriptor.input, [c, h, w]));
        }
        let mut x = images.clone();
        let mut prev: Vec<usize> = (0..c).collect();
        let mut outputs: Vec<Tensor> = Vec::new();
        let mut layer_iter = self.layers.iter();
        for stage in &self.descriptor.stages {
            let desc = match stage {
                StageDesc::MaxPool => {
                    x = kernels::max_pool2(&x)?.0;
                    continue;
                }
                StageDesc::Layer(d) => d,
            };
            let layer = layer_iter.next().expect("one compiled layer per descriptor layer");
            let input = match &layer.reducer {
                Some((rw, rb)) => kernels::conv2d_forward(&x, rw, Some(rb), 1, 0, 1)?,
                None => x.clone(),
            };
            let stem_in = ArchitectureDescriptor::stem_input(desc, &prev);
            let (ho, wo) = desc.out_hw;
            let hw = ho * wo;
            let width = desc.channels.len();
            let mut out = vec![0.0f32; n * width * hw];
            let mut stem_out = Vec::with_capacity(layer.stems.len());
            for (sd, s) in desc.stems.iter().zip(&layer.stems) {
                let pad = sd.kernel / 2;
                let y = match sd.conv_type {
                    ConvType::Normal => kernels::conv2d_forward(&input, &s.weight, Some(&s.bias), sd.stride, pad, 1)?,
                    ConvType::Depthwise => {
                        let gathered = gather_or_zero(&input, stem_in, &sd.channels)?;
                        kernels::conv2d_forward(&gathered, &s.weight, Some(&s.bias), sd.stride, pad, sd.channels.len())?
                    }
                };
                let y = match &s.bn {
                    Some(bn) => kernels::batchnorm_eval(&y, &bn.gamma, &bn.beta, &bn.stats, BN_EPS)?,
                    None => y,
                };
                stem_out.push(y);
            }
            let scale = 1.0 / desc.divisor as f32;
            for (od, slopes) in desc.operations.iter().zip(&layer.prelu) {
                let stem_channels = &desc.stems[od.stem].channels;
                let picks: Vec<usize> = od.channels.iter().map(|&ch| position(stem_channels, ch).expect("validated")).collect();
                let sel = stem_out[od.stem].select_channels(&picks)?;
                let act = match od.activation {
                    Activation::None => sel,
                    Activation::Relu => kernels::activation_forward(&sel, ActivationKind::Relu),
                    Activation::Tanh => kernels::activation_forward(&sel, ActivationKind::Tanh),
                    Activation::Prelu => kernels::prelu_forward(&sel, slopes.as_deref().expect("prelu slopes"))?,
                };
                let k = od.channels.len();
                for b in 0..n {
                    for (j, &ch) in od.channels.iter().enumerate() {
                        let dst = position(&desc.channels, ch).expect("validated");
                        let src = &act.data()[(b * k + j) * hw..][..hw];
                        let dst = &mut out[(b * width + dst) * hw..][..hw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * scale;
                        }
                    }
                }
            }
            if let Some(src) = desc.skip_source {
                let skip = &outputs[src];
                let src_channels = match &self.descriptor.stages.iter().filter_map(|s| match s {
                    StageDesc::Layer(l) => Some(l),
                    StageDesc::MaxPool => None,
                }).nth(src) {
                    Some(l) => l.channels.clone(),
                    None => return Err(Error::Wiring(format!("missing skip source {src}"))),
                };
                let k = src_channels.len();
                for b in 0..n {
                    for (j, &ch) in src_channels.iter().enumerate() {
                        let dst = position(&desc.channels, ch)
                            .ok_or_else(|| Error::Wiring(format!("skip channel {ch} pruned in layer {}", desc.index)))?;
                        let s = &skip.data()[(b * k + j) * hw..][..hw];
                        let d = &mut out[(b * width + dst) * hw..][..hw];
                        for (d, s) in d.iter_mut().zip(s) {
                            *d += s;
                        }
                    }
                }
            }
            x = Tensor::new(&[n, width, ho, wo], out)?;
            outputs.push(x.clone());
            prev = desc.channels.clone();
        }
        let pooled = kernels::global_avg_pool(&x)?;
        kernels::linear_forward(&pooled, &self.head_weight, Some(&self.head_bias))
    }

    /// Named weight arrays in a fixed order.
    pub fn export_weights(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = &layer.reducer {
                out.push((format!("layer{l}.reducer.weight"), w.data().to_vec()));
                out.push((format!("layer{l}.reducer.bias"), b.clone()));
            }
            for (s, stem) in layer.stems.iter().enumerate() {
                out.push((format!("layer{l}.stem{s}.weight"), stem.weight.data().to_vec()));
                out.push((format!("layer{l}.stem{s}.bias"), stem.bias.clone()));
                if let Some(bn) = &stem.bn {
                    out.push((format!("layer{l}.stem{s}.bn.gamma"), bn.gamma.clone()));
                    out.push((format!("layer{l}.stem{s}.bn.beta"), bn.beta.clone()));
                    out.push((format!("layer{l}.stem{s}.bn.running_mean"), bn.stats.mean.clone()));
                    out.push((format!("layer{l}.stem{s}.bn.running_var"), bn.stats.var.clone()));
                }
            }
            for (o, slopes) in layer.prelu.iter().enumerate() {
                if let Some(sl) = slopes {
                    out.push((format!("layer{l}.op{o}.prelu"), sl.clone()));
                }
            }
        }
        out.push((String::from("head.weight"), self.head_weight.data().to_vec()));
        out.push((String::from("head.bias"), self.head_bias.clone()));
        out
    }

    /// Rebuilds a compiled network from a descriptor and the arrays written
    /// by [`Self::export_weights`].
    pub fn from_weights(descriptor: ArchitectureDescriptor, arrays: &[(String, Vec<f32>)]) -> Result<Self> {
        descriptor.validate()?;
        let get = |name: String, len: usize| -> Result<Vec<f32>> {
            let data = arrays
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::State(format!("missing weight array {name}")))?;
            if data.len() != len {
                return Err(Error::State(format!("weight array {name} has {} values, expected {len}", data.len())));
            }
            Ok(data)
        };
        let mut layers = Vec::new();
        let mut prev: Vec<usize> = (0..descriptor.input[0]).collect();
        for (l, d) in descriptor.layers().enumerate() {
            let reducer = match &d.reducer {
                Some(r) => {
                    let (o, i) = (r.channels.len(), prev.len());
                    let w = Tensor::new(&[o, i, 1, 1], get(format!("layer{l}.reducer.weight"), o * i)?)?;
                    Some((w, get(format!("layer{l}.reducer.bias"), o)?))
                }
                None => None,
            };
            let stem_in = ArchitectureDescriptor::stem_input(d, &prev).len();
            let mut stems = Vec::new();
            for (s, sd) in d.stems.iter().enumerate() {
                let o = sd.channels.len();
                let cin = if sd.conv_type == ConvType::Depthwise { 1 } else { stem_in };
                let kk = sd.kernel * sd.kernel;
                let weight = Tensor::new(
                    &[o, cin, sd.kernel, sd.kernel],
                    get(format!("layer{l}.stem{s}.weight"), o * cin * kk)?,
                )?;
                let bias = get(format!("layer{l}.stem{s}.bias"), o)?;
                let bn = if sd.batch_norm {
                    Some(CompiledBn {
                        gamma: get(format!("layer{l}.stem{s}.bn.gamma"), o)?,
                        beta: get(format!("layer{l}.stem{s}.bn.beta"), o)?,
                        stats: RunningStats {
                            mean: get(format!("layer{l}.stem{s}.bn.running_mean"), o)?,
                            var: get(format!("layer{l}.stem{s}.bn.running_var"), o)?,
                        },
                    })
                } else {
                    None
                };
                stems.push(CompiledStem { weight, bias, bn });
            }
            let mut prelu = Vec::new();
            for (o, od) in d.operations.iter().enumerate() {
                prelu.push(if od.activation == Activation::Prelu {
                    Some(get(format!("layer{l}.op{o}.prelu"), od.channels.len())?)
                } else {
                    None
                });
            }
            layers.push(CompiledLayer { reducer, stems, prelu });
            prev = d.channels.clone();
        }
        let k = descriptor.num_classes;
        let head_in = descriptor.head_channels().len();
        Ok(CompiledArchitecture {
            head_weight: Tensor::new(&[k, head_in], get(String::from("head.weight"), k * head_in)?)?,
            head_bias: get(String::from("head.bias"), k)?,
            descriptor,
            layers,
        })
    }
}

/// Channels `wanted` of a tensor that only holds channels `have`; missing
/// ones are zero planes.
fn gather_or_zero(x: &Tensor, have: &[usize], wanted: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0f32; n * wanted.len() * hw];
    for b in 0..n {
        for (j, &ch) in wanted.iter().enumerate() {
            if let Some(i) = position(have, ch) {
                out[(b * wanted.len() + j) * hw..][..hw].copy_from_slice(&x.data()[(b * c + i) * hw..][..hw]);
            }
        }
    }
    Tensor::new(&[n, wanted.len(), h, w], out)
}
