use alloc::vec;
use alloc::vec::Vec;

use super::sgemm;
use crate::error::{config_err, shape_err};
use crate::{Result, Tensor};

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let (n, c_in, h, w) = input.dims4()?;
        let (c_out, c_in_g, kh, kw) = weight.dims4()?;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "groups={groups} must divide both input channels ({c_in}) and output channels ({c_out})"
            ));
        }
        if c_in / groups != c_in_g {
            return Err(shape_err!(
                "weight expects {c_in_g} input channels per group but input has {c_in} channels over {groups} groups"
            ));
        }
        if kh != kw {
            return Err(shape_err!("only square kernels are supported, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(config_err!("stride must be at least 1"));
        }
        let h_out = conv_output_size(h, kh, stride, padding)
            .ok_or_else(|| shape_err!("kernel {kh} does not fit input height {h} with padding {padding}"))?;
        let w_out = conv_output_size(w, kw, stride, padding)
            .ok_or_else(|| shape_err!("kernel {kw} does not fit input width {w} with padding {padding}"))?;
        Ok(Geometry { n, c_in, h, w, c_out, k: kh, h_out, w_out, stride, padding, groups })
    }

    fn cols_rows(&self) -> usize {
        self.c_in / self.groups * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.n * self.h_out * self.w_out
    }

    /// Unfolds the channels of group `g` into a `(c_in_g*k*k) x (n*h_out*w_out)` matrix.
    fn im2col(&self, x: &[f32], g: usize, cols: &mut [f32]) {
        let cin_g = self.c_in / self.groups;
        let (k, hw_out) = (self.k, self.h_out * self.w_out);
        let width = self.cols_width();
        for ci in 0..cin_g {
            let chan = g * cin_g + ci;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for b in 0..self.n {
                        let plane = &x[(b * self.c_in + chan) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            let out_row = &mut dst[b * hw_out + oy * self.w_out..][..self.w_out];
                            if iy < 0 || iy >= self.h as isize {
                                out_row.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let src = &plane[iy as usize * self.w..][..self.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds columns back into `dx`.
    fn col2im(&self, cols: &[f32], g: usize, dx: &mut [f32]) {
        let cin_g = self.c_in / self.groups;
        let (k, hw_out) = (self.k, self.h_out * self.w_out);
        let width = self.cols_width();
        for ci in 0..cin_g {
            let chan = g * cin_g + ci;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * width..(row + 1) * width];
                    for b in 0..self.n {
                        let plane = &mut dx[(b * self.c_in + chan) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_row = &src[b * hw_out + oy * self.w_out..][..self.w_out];
                            let dst = &mut plane[iy as usize * self.w..][..self.w];
                            for (ox, v) in in_row.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an NCHW batch.
///
/// `weight` is `(c_out, c_in / groups, k, k)`; `groups == c_in == c_out`
/// gives a depthwise convolution.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let geo = Geometry::new(input, weight, stride, padding, groups)?;
    if let Some(b) = bias {
        if b.len() != geo.c_out {
            return Err(shape_err!("bias has {} entries for {} output channels", b.len(), geo.c_out));
        }
    }
    let (rows, width) = (geo.cols_rows(), geo.cols_width());
    let cout_g = geo.c_out / groups;
    let hw_out = geo.h_out * geo.w_out;
    let mut cols = vec![0.0f32; rows * width];
    let mut prod = vec![0.0f32; cout_g * width];
    let mut out = vec![0.0f32; geo.n * geo.c_out * hw_out];
    for g in 0..groups {
        geo.im2col(input.data(), g, &mut cols);
        let w_g = &weight.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
        sgemm(cout_g, rows, width, 1.0, w_g, (rows, 1), &cols, (width, 1), 0.0, &mut prod, (width, 1));
        for co in 0..cout_g {
            let chan = g * cout_g + co;
            let shift = bias.map_or(0.0, |b| b[chan]);
            for b in 0..geo.n {
                let src = &prod[co * width + b * hw_out..][..hw_out];
                let dst = &mut out[(b * geo.c_out + chan) * hw_out..][..hw_out];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
    }
    Tensor::new(&[geo.n, geo.c_out, geo.h_out, geo.w_out], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGrads> {
    let geo = Geometry::new(input, weight, stride, padding, groups)?;
    let expected = [geo.n, geo.c_out, geo.h_out, geo.w_out];
    if grad_out.shape() != expected {
        return Err(shape_err!("conv grad has shape {:?}, expected {:?}", grad_out.shape(), expected));
    }
    let (rows, width) = (geo.cols_rows(), geo.cols_width());
    let cout_g = geo.c_out / groups;
    let hw_out = geo.h_out * geo.w_out;
    let mut cols = vec![0.0f32; rows * width];
    let mut dy = vec![0.0f32; cout_g * width];
    let mut dcols = vec![0.0f32; rows * width];
    let mut dx = vec![0.0f32; input.numel()];
    let mut dw = vec![0.0f32; weight.numel()];
    let mut db = vec![0.0f32; geo.c_out];
    for g in 0..groups {
        for co in 0..cout_g {
            let chan = g * cout_g + co;
            let mut acc = 0.0f32;
            for b in 0..geo.n {
                let src = &grad_out.data()[(b * geo.c_out + chan) * hw_out..][..hw_out];
                dy[co * width + b * hw_out..][..hw_out].copy_from_slice(src);
                acc += src.iter().sum::<f32>();
            }
            db[chan] = acc;
        }
        geo.im2col(input.data(), g, &mut cols);
        let dw_g = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
        sgemm(cout_g, width, rows, 1.0, &dy, (width, 1), &cols, (1, width), 0.0, dw_g, (rows, 1));
        let w_g = &weight.data()[g * cout_g * rows..(g + 1) * cout_g * rows];
        sgemm(rows, cout_g, width, 1.0, w_g, (1, rows), &dy, (width, 1), 0.0, &mut dcols, (width, 1));
        geo.col2im(&dcols, g, &mut dx);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: db,
    })
}
