//! Naive f64 reference implementations used as independent oracles.
#![allow(dead_code)]

pub fn conv2d(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, (usize, usize), u64) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * ho * wo];
    let mut mults = 0u64;
    for b in 0..n {
        for o in 0..cout {
            let grp = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                // taps on the zero padding still count as multiplications
                                mults += 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, (ho, wo), mults)
}

pub fn batchnorm_train(x: &[f64], (n, c, hw): (usize, usize, usize), gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let m = (n * hw) as f64;
    for ch in 0..c {
        let vals = (0..n).flat_map(|b| (0..hw).map(move |i| (b * c + ch) * hw + i));
        let idx: Vec<usize> = vals.collect();
        let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x[i] - mean) * (x[i] - mean)).sum::<f64>() / m;
        for &i in &idx {
            out[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    out
}

pub fn batchnorm_eval(
    x: &[f64],
    (c, hw): (usize, usize),
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect()
}

pub fn prelu(x: &[f64], (c, hw): (usize, usize), slope: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { v } else { slope[(i / hw) % c] * v })
        .collect()
}

pub fn linear(x: &[f64], (n, fin): (usize, usize), w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        for o in 0..fout {
            out[r * fout + o] = b[o] + (0..fin).map(|i| x[r * fin + i] * w[o * fin + i]).sum::<f64>();
        }
    }
    out
}

pub fn max_pool2(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], (n, c, hw): (usize, usize, usize)) -> Vec<f64> {
    (0..n * c).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn cross_entropy(logits: &[f64], (n, k): (usize, usize), labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        let row = &logits[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[r] as usize];
    }
    total / n as f64
}
