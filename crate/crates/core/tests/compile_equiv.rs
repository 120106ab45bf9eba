//! The compiled network against the masked supernet it came from.

use gatenas_core::compile::{compile, describe, StageDesc};
use gatenas_core::network::*;
use gatenas_core::rng::{self, Rng};
use gatenas_core::{Error, Tensor};
use proptest::prelude::*;

fn spec() -> NetworkSpec {
    let mut s = NetworkSpec::new(Backbone::PlainCnn, [2, 8, 8], 5);
    s.custom_layout = Some(vec![
        BackboneItem::Conv(6),
        BackboneItem::Conv(6),
        BackboneItem::MaxPool,
        BackboneItem::Conv(8),
    ]);
    s.conv_types = vec![ConvType::Normal, ConvType::Depthwise];
    s.kernels = vec![1, 3];
    s.activations = vec![Activation::Relu, Activation::Prelu];
    s.skips = vec![(0, 1)];
    s
}

fn randomized(seed: u64) -> SearchableNetwork {
    let mut net = SearchableNetwork::build(&spec(), seed).unwrap();
    let mut r = rng::seeded(seed + 100);
    for (_, p) in net.params.iter_mut() {
        let (lo, hi) = match p.name.rsplit('.').next().unwrap() {
            "running_var" => (0.5, 2.0),
            "gamma" => (0.5, 1.5),
            "prelu" => (0.05, 0.5),
            "weight" => continue,
            _ => (-0.5, 0.5),
        };
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng::uniform(&mut r, lo, hi));
    }
    net
}

fn random_pattern(net: &mut SearchableNetwork, r: &mut Rng, p_open: f32) {
    loop {
        let bits: Vec<bool> = (0..net.gates.total_gates()).map(|_| rng::uniform(r, 0.0, 1.0) < p_open).collect();
        let mut it = bits.into_iter();
        net.set_gate_pattern(|_, _| it.next().unwrap());
        if describe(net).is_ok() {
            return;
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

#[test]
fn fifty_patterns_sixteen_inputs() {
    let mut r = rng::seeded(41);
    let mut worst = 0.0f32;
    for pattern in 0..50 {
        let mut net = randomized(pattern);
        random_pattern(&mut net, &mut r, 0.5);
        let compiled = compile(&net).unwrap();
        let x = Tensor::from_fn(&[16, 2, 8, 8], |_| rng::uniform(&mut r, -1.0, 1.0));
        let a = net.predict(&x).unwrap();
        let b = compiled.forward(&x).unwrap();
        let diff = a.max_abs_diff(&b);
        worst = worst.max(diff);
        assert!(diff < 1e-5, "pattern {pattern}: max difference {diff}");
        for (ra, rb) in a.data().chunks(5).zip(b.data().chunks(5)) {
            assert_eq!(argmax(ra), argmax(rb));
        }
    }
    println!("worst difference {worst:e}");
}

#[test]
fn all_open_compiles_to_the_dense_network() {
    let net = randomized(7);
    let compiled = compile(&net).unwrap();
    let x = Tensor::from_fn(&[4, 2, 8, 8], |i| (i as f32 * 0.71).sin());
    assert!(net.predict(&x).unwrap().max_abs_diff(&compiled.forward(&x).unwrap()) < 1e-6);
    let trainable_without_running = net
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.tensor.numel())
        .sum::<usize>();
    assert_eq!(compiled.parameter_count(), trainable_without_running);
}

#[test]
fn closed_operation_keeps_original_divisor() {
    let mut s = NetworkSpec::new(Backbone::PlainCnn, [2, 6, 6], 3);
    s.custom_layout = Some(vec![BackboneItem::Conv(4)]);
    s.kernels = vec![1, 3];
    let mut net = SearchableNetwork::build(&s, 3).unwrap();
    let closed = net.layer(0).operations[1].gates;
    net.set_gate_pattern(|id, _| id != closed);
    let d = describe(&net).unwrap();
    let StageDesc::Layer(l) = &d.stages[0] else { panic!() };
    assert_eq!(l.operations.len(), 1);
    assert_eq!(l.stems.len(), 1);
    assert_eq!(l.divisor, 2);
    let x = Tensor::from_fn(&[2, 2, 6, 6], |i| (i as f32 * 0.3).cos());
    let compiled = compile(&net).unwrap();
    assert!(net.predict(&x).unwrap().max_abs_diff(&compiled.forward(&x).unwrap()) < 1e-6);
}

#[test]
fn dead_layer_is_named() {
    let mut net = randomized(8);
    let ops: Vec<_> = net.layer(2).operations.iter().map(|o| o.gates).collect();
    net.set_gate_pattern(|id, _| !ops.contains(&id));
    assert_eq!(compile(&net).unwrap_err(), Error::DeadLayer { layer: 2 });
    assert!(Error::DeadLayer { layer: 2 }.to_string().starts_with("dead layer 2"));
}

#[test]
fn pruned_skip_source_channel_is_wiring_error() {
    let net = randomized(9);
    let mut d = describe(&net).unwrap();
    let StageDesc::Layer(l) = &mut d.stages[1] else { panic!() };
    l.channels.retain(|&c| c != 3);
    for op in &mut l.operations {
        op.channels.retain(|&c| c != 3);
    }
    for s in &mut l.stems {
        s.channels.retain(|&c| c != 3);
    }
    assert!(matches!(d.validate(), Err(Error::Wiring(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn compiled_channels_are_exactly_the_open_gates(seed in 0u64..500) {
        let mut net = randomized(seed);
        let mut r = rng::seeded(seed);
        random_pattern(&mut net, &mut r, 0.4);
        let d = describe(&net).unwrap();
        for (layer, ld) in net.layers().zip(d.layers()) {
            let mut open_ops = layer.operations.iter().filter(|o| !net.gates.get(o.gates).active().is_empty());
            for od in &ld.operations {
                let op = open_ops.next().unwrap();
                prop_assert_eq!(&od.channels, &net.gates.get(op.gates).active());
            }
            prop_assert!(open_ops.next().is_none());
        }
    }
}
