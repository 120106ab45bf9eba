use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivationKind {
    Relu,
    Tanh,
}

pub fn activation_forward(x: &Tensor, kind: ActivationKind) -> Tensor {
    let data = match kind {
        ActivationKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        ActivationKind::Tanh => x.data().iter().map(|&v| libm::tanhf(v)).collect(),
    };
    Tensor::new(x.shape(), data).expect("same shape")
}

/// `out` is the forward output; tanh's derivative is read off it.
pub fn activation_backward(x: &Tensor, out: &Tensor, grad_out: &Tensor, kind: ActivationKind) -> Tensor {
    let dy = grad_out.data();
    let data: Vec<f32> = match kind {
        ActivationKind::Relu => x.data().iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
        ActivationKind::Tanh => out.data().iter().zip(dy).map(|(&t, &g)| g * (1.0 - t * t)).collect(),
    };
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Per-channel parametric ReLU over an NCHW tensor.
pub fn prelu_forward(x: &Tensor, slope: &[f32]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if slope.len() != c {
        return Err(shape_err!("prelu has {} slopes for {c} channels", slope.len()));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut out[(b * c + ch) * hw..][..hw] {
                if *v <= 0.0 {
                    *v *= slope[ch];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dslope)`.
pub fn prelu_backward(x: &Tensor, slope: &[f32], grad_out: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut dx = grad_out.data().to_vec();
    let mut dslope = alloc::vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let v = x.data()[i];
                if v <= 0.0 {
                    dslope[ch] += grad_out.data()[i] * v;
                    dx[i] *= slope[ch];
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, dslope))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let x = Tensor::new(&[1, 1, 1, 3], alloc::vec![-1.5, 0.0, -2.0]).unwrap();
        assert_eq!(activation_forward(&x, ActivationKind::Relu).data()[0], 0.0);
        assert_eq!(activation_forward(&x, ActivationKind::Tanh).data()[1], 0.0);
        assert_eq!(prelu_forward(&x, &[0.25]).unwrap().data()[2], -0.5);
    }
}
