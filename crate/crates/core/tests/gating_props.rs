//! Gate functions: finite-difference oracle and invariants.

use gatenas_core::gating::*;
use gatenas_core::rng;
use proptest::prelude::*;

fn softmax_on(on: f64, off: f64) -> f64 {
    let m = on.max(off);
    let (a, b) = ((on - m).exp(), (off - m).exp());
    a / (a + b)
}

#[test]
fn backward_matches_finite_differences_on_1000_pairs() {
    let mut r = rng::seeded(21);
    let h = 1e-4;
    for _ in 0..1000 {
        let on = rng::uniform(&mut r, -6.0, 6.0);
        let off = rng::uniform(&mut r, -6.0, 6.0);
        let up = rng::uniform(&mut r, -2.0, 2.0) as f64;
        let (g_on, g_off) = gate_backward(&GatePair::new(on, off), up);
        let (on, off) = (on as f64, off as f64);
        let fd_on = up * (softmax_on(on + h, off) - softmax_on(on - h, off)) / (2.0 * h);
        let fd_off = up * (softmax_on(on, off + h) - softmax_on(on, off - h)) / (2.0 * h);
        assert!((g_on - fd_on).abs() < 1e-6, "{g_on} vs {fd_on}");
        assert!((g_off - fd_off).abs() < 1e-6, "{g_off} vs {fd_off}");
    }
    assert_eq!(gate_backward(&GatePair::new(0.0, 0.0), 1.0), (0.25, -0.25));
    assert_eq!(gate_backward(&GatePair::new(0.0, 0.0), 3.0), (0.75, -0.75));
}

#[test]
fn specific_pair_matches_finite_difference() {
    let (g_on, _) = gate_backward(&GatePair::new(2.0, -1.0), 1.0);
    let h = 1e-4;
    let fd = (softmax_on(2.0 + h, -1.0) - softmax_on(2.0 - h, -1.0)) / (2.0 * h);
    assert!((g_on - fd).abs() < 1e-6);
}

fn vector(pairs: &[(f32, f32)]) -> GateVector {
    let mut v = GateVector::open(pairs.len(), GateOwner { layer: 0, op: 0 });
    for (g, &(on, off)) in v.gates.iter_mut().zip(pairs) {
        *g = GatePair::new(on, off);
    }
    v
}

#[test]
fn gamma_op_gradient_matches_surrogate_sum() {
    let mut r = rng::seeded(22);
    let pairs: Vec<(f32, f32)> = (0..16).map(|_| (rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0))).collect();
    let mut v = vector(&pairs);
    gamma_op_backward(&mut v, 1.5);
    for (g, &(on, off)) in v.gates.iter().zip(&pairs) {
        let h = 1e-4;
        let fd = 1.5 * (softmax_on(on as f64 + h, off as f64) - softmax_on(on as f64 - h, off as f64)) / (2.0 * h);
        assert!((g.grad_on as f64 - fd).abs() < 1e-6);
    }
}

#[test]
fn gamma_layer_gradient_is_surrogate_sum_through_identity() {
    let mut r = rng::seeded(23);
    let mut store = GateStore::new();
    let mut all = Vec::new();
    let ids: Vec<GateVecId> = (0..3)
        .map(|op| {
            let pairs: Vec<(f32, f32)> =
                (0..8).map(|_| (rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0))).collect();
            all.push(pairs.clone());
            let mut v = vector(&pairs);
            v.owner.op = op;
            store.add(v)
        })
        .collect();
    gamma_layer_backward(&mut store, &ids, 1.0);
    for (id, pairs) in ids.iter().zip(&all) {
        for (g, &(on, off)) in store.get(*id).gates.iter().zip(pairs) {
            let h = 1e-4;
            let fd = (softmax_on(on as f64 + h, off as f64) - softmax_on(on as f64 - h, off as f64)) / (2.0 * h);
            assert!((g.grad_on as f64 - fd).abs() < 1e-6);
            assert!((g.grad_off as f64 + fd).abs() < 1e-6);
        }
    }
}

fn pair() -> impl Strategy<Value = (f32, f32)> {
    (-8.0f32..8.0, -8.0f32..8.0)
}

proptest! {
    #[test]
    fn decision_is_binary_and_strict((on, off) in pair()) {
        let g = GatePair::new(on, off);
        let f = gate_forward(&g);
        prop_assert!(f == 0.0 || f == 1.0);
        prop_assert_eq!(f == 1.0, on > off);
        let s = g.surrogate();
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn surrogate_is_monotone_in_on((on, off) in pair(), delta in 0.01f32..2.0) {
        let a = GatePair::new(on, off).surrogate();
        let b = GatePair::new(on + delta, off).surrogate();
        prop_assert!(b > a);
    }

    #[test]
    fn shift_invariance((on, off) in pair(), c in -4.0f32..4.0) {
        // shifts by exactly representable amounts keep the f32 difference exact
        let c = (c * 8.0).round() / 8.0;
        let on = (on * 64.0).round() / 64.0;
        let off = (off * 64.0).round() / 64.0;
        let a = GatePair::new(on, off);
        let b = GatePair::new(on + c, off + c);
        prop_assert_eq!(gate_forward(&a), gate_forward(&b));
        prop_assert!((a.surrogate() - b.surrogate()).abs() < 1e-12);
    }

    #[test]
    fn gamma_op_is_count(bits in proptest::collection::vec(any::<bool>(), 1..40)) {
        let pairs: Vec<(f32, f32)> = bits.iter().map(|&b| if b { (1.0, 0.0) } else { (0.0, 1.0) }).collect();
        let v = vector(&pairs);
        let count = gamma_op(&v);
        prop_assert_eq!(count, bits.iter().filter(|&&b| b).count() as f64);
        prop_assert!(count <= v.len() as f64);
    }

    #[test]
    fn union_bounds(rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..5)) {
        let vs: Vec<GateVector> = rows
            .iter()
            .map(|r| vector(&r.iter().map(|&b| if b { (1.0, 0.0) } else { (0.0, 0.0) }).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&GateVector> = vs.iter().collect();
        let union = gamma_layer(&refs, None).unwrap();
        let ops: Vec<f64> = vs.iter().map(gamma_op).collect();
        prop_assert!(union <= ops.iter().sum::<f64>());
        prop_assert!(union >= ops.iter().cloned().fold(0.0, f64::max));
    }
}
