//! Central finite-difference checks (h = 1e-3) of every differentiable
//! primitive recorded by the graph.
//!
//! The finite differences are taken on naive f64 reference forwards, so the
//! comparison is against an independent implementation and free of f32
//! rounding noise.

use gatenas_core::graph::{Graph, Var};
use gatenas_core::kernels::{ActivationKind, RunningStats};
use gatenas_core::rng::{self, Rng};
use gatenas_core::Tensor;

use super::common;

pub const H: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const SHAPES: usize = 20;

fn random(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng::uniform(rng, lo, hi))
}

/// Moves elements at least `gap` away from `kink`.
fn avoid(t: &mut Tensor, kink: f32, gap: f32) {
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = if *v >= kink { kink + gap } else { kink - gap };
        }
    }
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

type Reference<'a> = &'a dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Compares the graph gradient of `sum(r * f(inputs))` with central
/// differences of the same loss built on `reference`. Returns the worst
/// elementwise relative error.
fn check(inputs: &[Tensor], rng: &mut Rng, build: &dyn Fn(&mut Graph, &[Var]) -> Var, reference: Reference) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &vars);
    let weights = random(rng, g.value(y).shape(), 0.5, 1.5);
    let wv = f64s(&weights);

    let base: Vec<Vec<f64>> = inputs.iter().map(f64s).collect();
    let ref_out = reference(&base);
    assert_eq!(ref_out.len(), g.value(y).numel(), "reference output size");
    for (a, b) in g.value(y).data().iter().zip(&ref_out) {
        assert!((*a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()), "forward {a} vs reference {b}");
    }

    let r = g.input(weights);
    let prod = g.mul(y, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let loss_of = |x: &[Vec<f64>]| -> f64 { reference(x).iter().zip(&wv).map(|(a, b)| a * b).sum() };

    let mut worst: f64 = 0.0;
    let mut work = base.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = work[i][j];
            work[i][j] = orig + H;
            let up = loss_of(&work);
            work[i][j] = orig - H;
            let down = loss_of(&work);
            work[i][j] = orig;
            let fd = (up - down) / (2.0 * H);
            let a = analytic[j] as f64;
            let rel = (a - fd).abs() / (fd.abs() + 1e-8);
            if rel >= REL_TOL {
                eprintln!("input {i} element {j}: analytic {a:e}, finite difference {fd:e}");
            }
            worst = worst.max(rel);
        }
    }
    worst
}


fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng::uniform(rng, 0.0, (hi - lo + 1) as f32) as usize).min(hi - lo)
}

fn nchw(rng: &mut Rng) -> (usize, usize, usize, usize) {
    (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5))
}

pub type Case = fn(&mut Rng, usize) -> f64;

pub const PRIMITIVES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("relu", relu),
    ("tanh", tanh),
    ("prelu", prelu),
    ("linear", linear),
    ("max_pool", max_pool),
    ("global_avg_pool", global_avg_pool),
    ("cross_entropy", cross_entropy),
    ("add_mul_scale", add_mul_scale),
    ("channel_gate", channel_gate),
];

/// Worst relative error of one primitive over [`SHAPES`] random shapes.
pub fn worst_error(name: &str, case: Case) -> f64 {
    let mut rng = rng::seeded(name.bytes().map(u64::from).sum());
    (0..SHAPES).map(|s| case(&mut rng, s)).fold(0.0, f64::max)
}

fn conv2d(rng: &mut Rng, s: usize) -> f64 {
    let groups = if s % 3 == 0 { 2 } else { 1 };
    let cin = groups * dim(rng, 1, 2);
    let cout = groups * dim(rng, 1, 2);
    let k = [1, 3, 5][s % 3];
    let stride = 1 + s % 2;
    let (n, h, w) = (dim(rng, 1, 2), dim(rng, k.max(3), 6), dim(rng, k.max(3), 6));
    let x = random(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = random(rng, &[cout, cin / groups, k, k], -1.0, 1.0);
    let b = random(rng, &[cout], -1.0, 1.0);
    check(
        &[x, wt, b],
        rng,
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2, groups).unwrap(),
        &|d| common::conv2d(&d[0], (n, cin, h, w), &d[1], (cout, k), Some(&d[2]), stride, k / 2, groups).0,
    )
}

fn batch_norm_train(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let n = n.max(2);
    let x = random(rng, &[n, c, h, w], -2.0, 2.0);
    let gamma = random(rng, &[c], 0.5, 1.5);
    let beta = random(rng, &[c], -0.5, 0.5);
    check(
        &[x, gamma, beta],
        rng,
        &|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
        &|d| common::batchnorm_train(&d[0], (n, c, h * w), &d[1], &d[2], 1e-5),
    )
}

fn batch_norm_eval(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let x = random(rng, &[n, c, h, w], -2.0, 2.0);
    let gamma = random(rng, &[c], 0.5, 1.5);
    let beta = random(rng, &[c], -0.5, 0.5);
    let stats = RunningStats {
        mean: (0..c).map(|_| rng::uniform(rng, -0.5, 0.5)).collect(),
        var: (0..c).map(|_| rng::uniform(rng, 0.5, 2.0)).collect(),
    };
    let (mean, var): (Vec<f64>, Vec<f64>) =
        (stats.mean.iter().map(|&v| v as f64).collect(), stats.var.iter().map(|&v| v as f64).collect());
    check(
        &[x, gamma, beta],
        rng,
        &|g, v| g.batch_norm_eval(v[0], v[1], v[2], &stats, 1e-5).unwrap(),
        &|d| common::batchnorm_eval(&d[0], (c, h * w), &d[1], &d[2], &mean, &var, 1e-5),
    )
}

fn relu(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let mut x = random(rng, &[n, c, h, w], -2.0, 2.0);
    avoid(&mut x, 0.0, 1e-2);
    check(&[x], rng, &|g, v| g.activation(v[0], ActivationKind::Relu), &|d| {
        d[0].iter().map(|&v| v.max(0.0)).collect()
    })
}

fn tanh(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let x = random(rng, &[n, c, h, w], -2.0, 2.0);
    check(&[x], rng, &|g, v| g.activation(v[0], ActivationKind::Tanh), &|d| {
        d[0].iter().map(|&v| v.tanh()).collect()
    })
}

fn prelu(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let mut x = random(rng, &[n, c, h, w], -2.0, 2.0);
    avoid(&mut x, 0.0, 1e-2);
    let slope = random(rng, &[c], 0.05, 0.5);
    check(&[x, slope], rng, &|g, v| g.prelu(v[0], v[1]).unwrap(), &|d| common::prelu(&d[0], (c, h * w), &d[1]))
}

fn linear(rng: &mut Rng, _s: usize) -> f64 {
    let (n, fin, fout) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
    let x = random(rng, &[n, fin], -1.0, 1.0);
    let w = random(rng, &[fout, fin], -1.0, 1.0);
    let b = random(rng, &[fout], -1.0, 1.0);
    check(&[x, w, b], rng, &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), &|d| {
        common::linear(&d[0], (n, fin), &d[1], fout, &d[2])
    })
}

fn max_pool(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let (h, w) = (2 * h, 2 * w);
    // a shuffled grid keeps every window's maximum at least 0.02 ahead
    let mut values: Vec<f32> = (0..n * c * h * w).map(|i| i as f32 * 0.02).collect();
    rng::shuffle(rng, &mut values);
    let x = Tensor::new(&[n, c, h, w], values).unwrap();
    check(&[x], rng, &|g, v| g.max_pool2(v[0]).unwrap(), &|d| common::max_pool2(&d[0], (n, c, h, w)))
}

fn global_avg_pool(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let x = random(rng, &[n, c, h, w], -1.0, 1.0);
    check(&[x], rng, &|g, v| g.global_avg_pool(v[0]).unwrap(), &|d| {
        common::global_avg_pool(&d[0], (n, c, h * w))
    })
}

fn cross_entropy(rng: &mut Rng, _s: usize) -> f64 {
    let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
    let logits = random(rng, &[n, k], -2.0, 2.0);
    let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    let l2 = labels.clone();
    check(&[logits], rng, &move |g, v| g.cross_entropy(v[0], &labels).unwrap(), &move |d| {
        vec![common::cross_entropy(&d[0], (n, k), &l2)]
    })
}

fn add_mul_scale(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let a = random(rng, &[n, c, h, w], -1.0, 1.0);
    let b = random(rng, &[n, c, h, w], -1.0, 1.0);
    check(
        &[a, b],
        rng,
        &|g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let m = g.mul(s, v[1]).unwrap();
            g.scale(m, 0.37)
        },
        &|d| d[0].iter().zip(&d[1]).map(|(a, b)| (a + b) * b * 0.37f32 as f64).collect(),
    )
}

fn channel_gate(rng: &mut Rng, _s: usize) -> f64 {
    let (n, c, h, w) = nchw(rng);
    let x = random(rng, &[n, c, h, w], -1.0, 1.0);
    let mask: Vec<f32> = (0..c).map(|i| (i % 2) as f32).collect();
    let m2 = mask.clone();
    check(&[x], rng, &move |g, v| g.channel_gate(v[0], &mask, mask.clone(), None).unwrap(), &move |d| {
        d[0].iter().enumerate().map(|(i, &v)| v * m2[(i / (h * w)) % c] as f64).collect()
    })
}
