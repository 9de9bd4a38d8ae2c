//! Register-tiled GEMM with a fixed per-entry accumulation order.
//!
//! `c[i][j]` always receives its products in ascending `k`, starting from the
//! value already in `c`. Neither the tiling nor vectorisation across `j`
//! reassociates a sum, so results match a scalar triple loop bit for bit in
//! both `f32` and `f64`.

use std::ops::{Add, Mul};

pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Mul<Output = Self> + PartialOrd
{
    const ZERO: Self;
    fn gemm_acc(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        c: &mut [Self],
        ldc: usize,
    );
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn gemm_acc(
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        gemm_tiled::<f64, 8>(m, n, k, a, lda, b, ldb, c, ldc)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn gemm_acc(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        c: &mut [f32],
        ldc: usize,
    ) {
        gemm_tiled::<f32, 16>(m, n, k, a, lda, b, ldb, c, ldc)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major with leading dimensions.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    T::gemm_acc(m, n, k, a, lda, b, ldb, c, ldc)
}

const MR: usize = 4;
/// Depth of one packed panel of `b`.
const KC: usize = 256;
/// Width of one packed panel of `b`.
const NC: usize = 256;

/// Panels of `b` (`KC × NC`) are copied into `NR`-wide column slivers so
/// the microkernel streams contiguous memory. Panels are visited in
/// ascending `k`, and `c` is the accumulator between panels, so each entry
/// still sees its products in ascending order.
#[allow(clippy::too_many_arguments)]
fn gemm_tiled<T: Scalar, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut packed = vec![T::ZERO; KC.min(k) * NC.min(n).div_ceil(NR) * NR];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        for j0 in (0..n).step_by(NC) {
            let nc = NC.min(n - j0);
            let slivers = nc.div_ceil(NR);
            for s in 0..slivers {
                let dst = &mut packed[s * kc * NR..(s + 1) * kc * NR];
                let js = j0 + s * NR;
                let w = NR.min(n - js);
                for kk in 0..kc {
                    let src = &b[(k0 + kk) * ldb + js..(k0 + kk) * ldb + js + w];
                    let row = &mut dst[kk * NR..(kk + 1) * NR];
                    row[..w].copy_from_slice(src);
                    row[w..].iter_mut().for_each(|x| *x = T::ZERO);
                }
            }
            let mut i = 0;
            while i < m {
                let rows = MR.min(m - i);
                for s in 0..slivers {
                    let js = j0 + s * NR;
                    let w = NR.min(n - js);
                    let panel = &packed[s * kc * NR..(s + 1) * kc * NR];
                    if rows == MR {
                        micro::<T, NR>(
                            kc,
                            &a[i * lda + k0..],
                            lda,
                            panel,
                            &mut c[i * ldc + js..],
                            ldc,
                            w,
                        );
                    } else {
                        edge::<T, NR>(
                            rows,
                            kc,
                            &a[i * lda + k0..],
                            lda,
                            panel,
                            &mut c[i * ldc + js..],
                            ldc,
                            w,
                        );
                    }
                }
                i += MR;
            }
        }
    }
}

/// `MR × NR` tile: `c += a·panel` over `kc` steps, `w ≤ NR` valid columns.
#[inline(always)]
fn micro<T: Scalar, const NR: usize>(
    kc: usize,
    a: &[T],
    lda: usize,
    panel: &[T],
    c: &mut [T],
    ldc: usize,
    w: usize,
) {
    if w == NR {
        micro_full::<T, NR>(kc, a, lda, panel, c, ldc);
        return;
    }
    let mut acc = [[T::ZERO; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row[..w].copy_from_slice(&c[r * ldc..r * ldc + w]);
    }
    for kk in 0..kc {
        let bk: &[T; NR] = panel[kk * NR..(kk + 1) * NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * lda + kk];
            for x in 0..NR {
                row[x] = row[x] + av * bk[x];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + w].copy_from_slice(&row[..w]);
    }
}

#[inline(always)]
fn micro_full<T: Scalar, const NR: usize>(
    kc: usize,
    a: &[T],
    lda: usize,
    panel: &[T],
    c: &mut [T],
    ldc: usize,
) {
    let mut acc = [[T::ZERO; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        *row = c[r * ldc..r * ldc + NR].try_into().unwrap();
    }
    let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[r * lda..r * lda + kc]);
    for (kk, bk) in panel.chunks_exact(NR).take(kc).enumerate() {
        let bk: &[T; NR] = bk.try_into().unwrap();
        for (row, ar) in acc.iter_mut().zip(&a_rows) {
            let av = ar[kk];
            for x in 0..NR {
                row[x] = row[x] + av * bk[x];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge<T: Scalar, const NR: usize>(
    rows: usize,
    kc: usize,
    a: &[T],
    lda: usize,
    panel: &[T],
    c: &mut [T],
    ldc: usize,
    w: usize,
) {
    for r in 0..rows {
        let crow = &mut c[r * ldc..r * ldc + w];
        for kk in 0..kc {
            let av = a[r * lda + kk];
            for (cv, &bv) in crow.iter_mut().zip(&panel[kk * NR..]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Row-major transpose of an `rows×cols` slice into `cols×rows`.
pub(crate) fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}
