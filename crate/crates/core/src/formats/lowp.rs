//! f32 carriers for the emulated low-precision engines.
//!
//! Codes of fp16/bf16/e4m3 have at most 11 significant bits, so their
//! pairwise products are exact in f32 and a plain `c + a*b` in f32 is one
//! correctly rounded fused step.

use super::round::{round_to, FloatFormat};
use crate::dense::kernels::gemm_acc;
use crate::dense::Matrix;

#[inline]
pub(crate) fn round32(x: f64, f: FloatFormat) -> f32 {
    round_to(x, f) as f32
}

pub(crate) fn to_f32(m: &Matrix) -> Vec<f32> {
    m.as_slice().iter().map(|&x| x as f32).collect()
}

/// `m` transposed into a `cols × rows` f32 buffer.
pub(crate) fn to_f32_transposed(m: &Matrix) -> Vec<f32> {
    let (r, c) = m.shape();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for (j, &x) in m.row(i).iter().enumerate() {
            out[j * r + i] = x as f32;
        }
    }
    out
}

/// `c[m×n] = a[m×k] · b[k×n]` with f32 accumulation from zero.
pub(crate) fn gemm32(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
) {
    c[..m * n].iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(m, n, k, a, lda, b, ldb, c, n);
}
