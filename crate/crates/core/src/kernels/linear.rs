use alloc::vec;
use alloc::vec::Vec;

use super::sgemm;
use crate::error::shape_err;
use crate::{Result, Tensor};

/// `y = x w^T + b` with `x: (N, in)`, `w: (out, in)`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&[f32]>) -> Result<Tensor> {
    let (n, d_in) = x.dims2()?;
    let (d_out, w_in) = w.dims2()?;
    if d_in != w_in {
        return Err(shape_err!("linear layer expects {w_in} inputs, got {d_in}"));
    }
    let mut out = vec![0.0f32; n * d_out];
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(shape_err!("linear bias has {} entries for {d_out} outputs", b.len()));
        }
        for row in out.chunks_mut(d_out.max(1)) {
            row.copy_from_slice(b);
        }
    }
    sgemm(n, d_in, d_out, 1.0, x.data(), (d_in, 1), w.data(), (1, d_in), 1.0, &mut out, (d_out, 1));
    Tensor::new(&[n, d_out], out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (n, d_in) = x.dims2()?;
    let (d_out, _) = w.dims2()?;
    if grad_out.shape() != [n, d_out] {
        return Err(shape_err!("linear grad has shape {:?}, expected [{n}, {d_out}]", grad_out.shape()));
    }
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; n * d_in];
    sgemm(n, d_out, d_in, 1.0, dy, (d_out, 1), w.data(), (d_in, 1), 0.0, &mut dx, (d_in, 1));
    let mut dw = vec![0.0f32; d_out * d_in];
    sgemm(d_out, n, d_in, 1.0, dy, (1, d_out), x.data(), (d_in, 1), 0.0, &mut dw, (d_in, 1));
    let mut db = vec![0.0f32; d_out];
    for row in dy.chunks(d_out.max(1)) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((Tensor::new(&[n, d_in], dx)?, Tensor::new(&[d_out, d_in], dw)?, db))
}
