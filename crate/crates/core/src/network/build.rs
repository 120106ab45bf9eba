use alloc::format;
use alloc::vec::Vec;

use super::*;
use crate::error::config_err;
use crate::gating::{GateOwner, GateVector};
use crate::rng::{self, Rng};
use crate::Tensor;

fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrtf(6.0 / fan_in.max(1) as f32);
    Tensor::from_fn(shape, |_| rng::uniform(rng, -bound, bound))
}

impl SearchableNetwork {
    /// Builds the backbone with every candidate operation attached to every
    /// convolution layer, all gates open. Parameters are drawn from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> crate::Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let mut gates = GateStore::new();
        let mut stages = Vec::new();
        let mut layer_stage = Vec::new();
        // (channels, (h, w)) of each layer output, for skip validation
        let mut layer_out: Vec<(usize, (usize, usize), usize)> = Vec::new();

        let [mut channels, mut h, mut w] = spec.input;
        let layout = spec.layout();
        let n_layers = layout.iter().filter(|i| matches!(i, BackboneItem::Conv(_))).count();
        for &(from, to) in &spec.skips {
            if from >= to || to >= n_layers {
                return Err(config_err!("skip {from}->{to} must satisfy from < to < {n_layers}"));
            }
        }
        for (i, &(_, to)) in spec.skips.iter().enumerate() {
            if spec.skips[..i].iter().any(|&(_, t)| t == to) {
                return Err(config_err!("layer {to} receives more than one identity connection"));
            }
        }
        let receives_skip = |l: usize| spec.skips.iter().any(|&(_, t)| t == l);

        for item in layout {
            match item {
                BackboneItem::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(config_err!("input {:?} is too small for the {} backbone", spec.input, spec.backbone));
                    }
                    h /= 2;
                    w /= 2;
                    stages.push(Stage::MaxPool);
                }
                BackboneItem::Conv(out_channels) => {
                    let index = layer_stage.len();
                    let reducer = if spec.reducers && index > 0 && receives_skip(index - 1) {
                        let weight = params.add(
                            format!("layer{index}.reducer.weight"),
                            kaiming_uniform(&mut rng, &[channels, channels, 1, 1], channels),
                            true,
                        );
                        let bias = params.add(format!("layer{index}.reducer.bias"), Tensor::zeros(&[channels]), true);
                        let gv = gates.add(GateVector::open(channels, GateOwner { layer: index, op: GateOwner::REDUCER }));
                        Some(Reducer { weight, bias, gates: gv, in_channels: channels, out_channels: channels })
                    } else {
                        None
                    };

                    let mut stems = Vec::new();
                    let mut operations = Vec::new();
                    for &conv_type in &spec.conv_types {
                        if conv_type == ConvType::Depthwise && channels != out_channels {
                            continue;
                        }
                        for &kernel in &spec.kernels {
                            let s = stems.len();
                            let groups = if conv_type == ConvType::Depthwise { channels } else { 1 };
                            let cin_g = channels / groups;
                            let prefix = format!("layer{index}.stem{s}");
                            let weight = params.add(
                                format!("{prefix}.weight"),
                                kaiming_uniform(&mut rng, &[out_channels, cin_g, kernel, kernel], cin_g * kernel * kernel),
                                true,
                            );
                            let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]), true);
                            let bn = (spec.norm == Norm::Batch).then(|| BnParams {
                                gamma: params.add(format!("{prefix}.bn.gamma"), Tensor::full(&[out_channels], 1.0), true),
                                beta: params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[out_channels]), true),
                                running_mean: params.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[out_channels]), false),
                                running_var: params.add(format!("{prefix}.bn.running_var"), Tensor::full(&[out_channels], 1.0), false),
                            });
                            stems.push(Stem { conv_type, kernel, stride: 1, weight, bias, bn });
                            for &activation in &spec.activations {
                                let op = operations.len();
                                let prelu = (activation == Activation::Prelu).then(|| {
                                    params.add(
                                        format!("layer{index}.op{op}.prelu"),
                                        Tensor::full(&[out_channels], PRELU_INIT),
                                        true,
                                    )
                                });
                                let gv = gates.add(GateVector::open(out_channels, GateOwner { layer: index, op }));
                                operations.push(Operation { stem: s, activation, prelu, gates: gv });
                            }
                        }
                    }
                    if operations.is_empty() {
                        return Err(config_err!(
                            "layer {index} ({channels} -> {out_channels} channels) has no applicable candidate operation; \
                             depthwise convolutions need equal input and output channels"
                        ));
                    }

                    let skip_source = spec.skips.iter().find(|&&(_, t)| t == index).map(|&(f, _)| f);
                    if let Some(src) = skip_source {
                        let (c, hw, stage) = layer_out[src];
                        let pooled = stages[stage..].iter().any(|s| matches!(s, Stage::MaxPool));
                        if c != out_channels || hw != (h, w) || pooled {
                            return Err(config_err!(
                                "skip {src}->{index} connects {c} channels at {hw:?} to {out_channels} channels at {:?}",
                                (h, w)
                            ));
                        }
                    }

                    layer_stage.push(stages.len());
                    layer_out.push((out_channels, (h, w), stages.len()));
                    stages.push(Stage::Layer(SearchableLayer {
                        index,
                        in_channels: channels,
                        out_channels,
                        in_hw: (h, w),
                        out_hw: (h, w),
                        stems,
                        operations,
                        skip_source,
                        reducer,
                    }));
                    channels = out_channels;
                }
            }
        }

        let head = Head {
            weight: params.add("head.weight", kaiming_uniform(&mut rng, &[spec.num_classes, channels], channels), true),
            bias: params.add("head.bias", Tensor::zeros(&[spec.num_classes]), true),
            in_features: channels,
            out_features: spec.num_classes,
        };

        Ok(SearchableNetwork { spec: spec.clone(), stages, layer_stage, head, params, gates, gates_frozen: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kernels: &[usize], activations: &[Activation]) -> NetworkSpec {
        let mut s = NetworkSpec::new(Backbone::PlainCnn, [1, 12, 12], 4);
        s.kernels = kernels.to_vec();
        s.activations = activations.to_vec();
        s
    }

    #[test]
    fn one_stem_per_kernel() {
        let net = SearchableNetwork::build(&spec(&[1, 3, 5], &[Activation::Relu]), 0).unwrap();
        assert_eq!(net.num_layers(), 4);
        for layer in net.layers() {
            assert_eq!(layer.num_operations(), 3);
            assert_eq!(layer.stems.len(), 3);
        }
    }

    #[test]
    fn activation_variants_share_one_stem() {
        let net = SearchableNetwork::build(&spec(&[3], &[Activation::Relu, Activation::Prelu, Activation::Tanh]), 0).unwrap();
        for layer in net.layers() {
            assert_eq!(layer.num_operations(), 3);
            assert_eq!(layer.stems.len(), 1);
            assert!(layer.operations.iter().all(|o| o.stem == 0));
        }
    }

    #[test]
    fn search_space_size() {
        let net = SearchableNetwork::build(&spec(&[1, 3], &[Activation::Relu]), 0).unwrap();
        assert_eq!(net.layer(0).search_space_log2(), 2 * 32);
        assert_eq!(net.layer(3).search_space_log2(), 2 * 128);
    }

    #[test]
    fn depthwise_only_where_channels_match() {
        let mut s = spec(&[3], &[Activation::Relu]);
        s.conv_types = alloc::vec![ConvType::Normal, ConvType::Depthwise];
        let net = SearchableNetwork::build(&s, 0).unwrap();
        let ops: Vec<usize> = net.layers().map(|l| l.num_operations()).collect();
        assert_eq!(ops, [1, 1, 1, 2]);
        s.conv_types = alloc::vec![ConvType::Depthwise];
        assert!(matches!(SearchableNetwork::build(&s, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn rejects_bad_kernel_and_empty_sets() {
        let mut s = spec(&[2], &[Activation::Relu]);
        let err = SearchableNetwork::build(&s, 0).unwrap_err();
        assert!(alloc::format!("{err}").contains("kernel must be one of 1,3,5,7,9,11"));
        s.kernels = alloc::vec![3];
        s.activations.clear();
        assert!(SearchableNetwork::build(&s, 0).is_err());
    }

    #[test]
    fn skip_validation_and_reducer() {
        let mut s = spec(&[3], &[Activation::Relu]);
        s.skips = alloc::vec![(2, 3)];
        let net = SearchableNetwork::build(&s, 0).unwrap();
        assert_eq!(net.layer(3).skip_source, Some(2));
        // layer 3 is the last layer, so no reducer follows it
        assert!(net.layers().all(|l| l.reducer.is_none()));
        s.skips = alloc::vec![(1, 2)];
        assert!(SearchableNetwork::build(&s, 0).is_err(), "64 -> 128 channels cannot be added");
    }

    #[test]
    fn reducer_follows_identity_connection() {
        let mut s = spec(&[3], &[Activation::Relu]);
        s.custom_layout = Some(alloc::vec![BackboneItem::Conv(4), BackboneItem::Conv(4), BackboneItem::Conv(6)]);
        s.skips = alloc::vec![(0, 1)];
        let net = SearchableNetwork::build(&s, 0).unwrap();
        let r = net.layer(2).reducer.as_ref().unwrap();
        assert_eq!((r.in_channels, r.out_channels), (4, 4));
        assert_eq!(net.gates.len(), 4);
        s.reducers = false;
        assert!(SearchableNetwork::build(&s, 0).unwrap().layer(2).reducer.is_none());
    }

    #[test]
    fn same_seed_same_weights() {
        let s = spec(&[1, 3], &[Activation::Relu]);
        let a = SearchableNetwork::build(&s, 5).unwrap();
        let b = SearchableNetwork::build(&s, 5).unwrap();
        let c = SearchableNetwork::build(&s, 6).unwrap();
        assert_eq!(a.export_params(), b.export_params());
        assert_ne!(a.export_params(), c.export_params());
    }
}
