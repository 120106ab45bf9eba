use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Result, Tensor};

/// 2x2 max pooling with stride 2 (floor). Returns the output and, per output
/// element, the flat input index that won.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(shape_err!("cannot 2x2-pool a {h}x{w} feature map"));
    }
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    let data = x.data();
    for plane in 0..n * c {
        let src = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = src + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = src + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// Averages each channel plane: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let out = x.data().chunks(hw.max(1)).take(n * c).map(|p| p.iter().sum::<f32>() * inv).collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(shape_err!("global pool input must be rank 4"));
    };
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut out = Vec::with_capacity(n * c * hw);
    for &g in grad_out.data() {
        out.extend(core::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_block_max() {
        let x = Tensor::from_fn(&[1, 1, 2, 4], |i| [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, -1.0][i]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::from_fn(&[1, 2, 1, 2], |i| i as f32);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[0.5, 2.5]);
    }
}
