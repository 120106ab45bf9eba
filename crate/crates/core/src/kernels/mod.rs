//! Forward and backward kernels on plain tensors.
//!
//! These are the building blocks the [`graph`](crate::graph) records; they
//! are also used directly by compiled (inference-only) networks.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{
    activation_backward, activation_forward, prelu_backward, prelu_forward, ActivationKind,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGrads};
pub use linear::{linear_backward, linear_forward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, batchnorm_train, BnMode, BnSaved,
    RunningStats,
};
pub use norm::update_running as norm_update_running;
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward};

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
