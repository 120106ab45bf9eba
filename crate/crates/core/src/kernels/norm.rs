use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err};
use crate::{Result, Tensor};

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    /// Biased batch variance.
    pub var: Vec<f32>,
}

fn check_affine(c: usize, gamma: &[f32], beta: &[f32], eps: f32) -> Result<()> {
    if !(eps > 0.0) {
        return Err(config_err!("batch norm epsilon must be positive, got {eps}"));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "batch norm over {c} channels got gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        ));
    }
    Ok(())
}

/// Normalizes with batch statistics over `(N, H, W)`.
pub fn batchnorm_train(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<(Tensor, BnSaved)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta, eps)?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let data = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            sum += data[(b * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += data[(b * c + ch) * hw..][..hw].iter().map(|&v| { let d = v as f64 - m; d * d }).sum::<f64>();
        }
        let v = sq / count;
        mean[ch] = m as f32;
        var[ch] = v as f32;
        inv_std[ch] = (1.0 / libm::sqrt(v + eps as f64)) as f32;
    }
    let mut xhat = vec![0.0f32; x.numel()];
    let mut out = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, BnSaved { xhat, inv_std, mean, var }))
}

/// Normalizes with running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    stats: &RunningStats,
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta, eps)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(shape_err!("running statistics do not cover {c} channels"));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; x.numel()];
    for ch in 0..c {
        let inv_std = (1.0 / libm::sqrt(stats.var[ch] as f64 + eps as f64)) as f32;
        let scale = gamma[ch] * inv_std;
        let shift = beta[ch] - stats.mean[ch] * scale;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                out[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Full batch-norm forward: in train mode normalizes by batch statistics and
/// folds them into `stats` with the given momentum; in eval mode reads `stats`.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    stats: &mut RunningStats,
    mode: BnMode,
    momentum: f32,
    eps: f32,
) -> Result<Tensor> {
    match mode {
        BnMode::Eval => batchnorm_eval(x, gamma, beta, stats, eps),
        BnMode::Train => {
            let (out, saved) = batchnorm_train(x, gamma, beta, eps)?;
            let (n, _, h, w) = x.dims4()?;
            update_running(stats, &saved, n * h * w, momentum);
            Ok(out)
        }
    }
}

pub fn update_running(stats: &mut RunningStats, saved: &BnSaved, count: usize, momentum: f32) {
    let correction = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
    for ch in 0..stats.mean.len() {
        stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * saved.mean[ch];
        stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * saved.var[ch] * correction;
    }
}

/// Gradients `(dx, dgamma, dbeta)` of a train-mode forward pass.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    saved: &BnSaved,
    gamma: &[f32],
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if saved.xhat.len() != grad_out.numel() || gamma.len() != c {
        return Err(shape_err!("batch norm backward shapes disagree"));
    }
    let hw = h * w;
    let count = (n * hw) as f32;
    let dy = grad_out.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sg += (dy[i] * saved.xhat[i]) as f64;
                sb += dy[i] as f64;
            }
        }
        dgamma[ch] = sg as f32;
        dbeta[ch] = sb as f32;
    }
    let mut dx = vec![0.0f32; grad_out.numel()];
    for ch in 0..c {
        let k = gamma[ch] * saved.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = k * (count * dy[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch]);
            }
        }
    }
    Ok((Tensor::new(grad_out.shape(), dx)?, dgamma, dbeta))
}
