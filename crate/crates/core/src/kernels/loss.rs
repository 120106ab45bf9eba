use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Result, Tensor};

/// Mean softmax cross-entropy over a batch of logits `(N, K)`.
///
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(k.max(1)).zip(labels) {
        if label as usize >= k {
            return Err(shape_err!("label {label} out of range for {k} classes"));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| libm::exp((v - max) as f64)).sum();
        let log_sum = libm::log(sum);
        total += log_sum - (row[label as usize] - max) as f64;
        probs.extend(row.iter().map(|&v| (libm::exp((v - max) as f64) / sum) as f32));
    }
    Ok(((total / n as f64) as f32, Tensor::new(&[n, k], probs)?))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[u32], upstream: f32) -> Tensor {
    let (n, k) = probs.dims2().expect("probabilities are rank 2");
    let scale = upstream / n as f32;
    let mut grad = probs.clone().into_data();
    for (row, &label) in grad.chunks_mut(k.max(1)).zip(labels) {
        row[label as usize] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(&[n, k], grad).expect("same shape")
}
