use super::{AttentionGrads, AttentionInputs};
use crate::dense::kernels::{gemm_acc, transpose_into};
use crate::dense::{matmul, Matrix};
use crate::error::{mismatch, Result};

/// Dense forward results: `S = αQKᵀ` (masked entries −∞), `P = softmax(S)`,
/// `O = PV` and the row logsumexp `L`.
#[derive(Clone, Debug)]
pub struct StdForward {
    pub o: Matrix,
    pub s: Matrix,
    pub p: Matrix,
    pub l: Vec<f64>,
}

fn k_transposed(k: &Matrix) -> Vec<f64> {
    let mut kt = vec![0.0; k.rows() * k.cols()];
    transpose_into(k.as_slice(), k.rows(), k.cols(), &mut kt);
    kt
}

/// Scores for query rows `r0..r1` into `s` (`(r1−r0) × N`).
pub(crate) fn score_rows(
    inputs: &AttentionInputs,
    kt: &[f64],
    r0: usize,
    r1: usize,
    s: &mut [f64],
) {
    let (n, d) = (inputs.kv_len(), inputs.head_dim());
    let rows = r1 - r0;
    s[..rows * n].iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(rows, n, d, &inputs.q.as_slice()[r0 * d..], d, kt, n, s, n);
    for r in 0..rows {
        for (j, x) in s[r * n..(r + 1) * n].iter_mut().enumerate() {
            *x = if inputs.masked(r0 + r, j) {
                f64::NEG_INFINITY
            } else {
                inputs.alpha * *x
            };
        }
    }
}

/// Row softmax in place; returns `L`. Fully masked rows become zeros with `L = −∞`.
pub(crate) fn softmax_row(row: &mut [f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return f64::NEG_INFINITY;
    }
    let mut ell = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        ell += *x;
    }
    row.iter_mut().for_each(|x| *x /= ell);
    m + ell.ln()
}

pub fn std_attention_fwd(inputs: &AttentionInputs) -> Result<StdForward> {
    inputs.validate()?;
    let (m, n) = (inputs.query_len(), inputs.kv_len());
    let kt = k_transposed(inputs.k);
    let mut s = vec![0.0; m * n];
    score_rows(inputs, &kt, 0, m, &mut s);
    let s = Matrix::from_vec(m, n, s)?;
    let mut p = s.clone();
    let l = (0..m).map(|i| softmax_row(p.row_mut(i))).collect();
    let o = matmul(&p, inputs.v, false)?;
    Ok(StdForward { o, s, p, l })
}

const CHUNK_ROWS: usize = 64;

/// `O` and `L` of the dense forward, computed in row chunks so the `N×N`
/// score matrix is never held. Entries match [`std_attention_fwd`] exactly.
pub fn std_attention_output(inputs: &AttentionInputs) -> Result<(Matrix, Vec<f64>)> {
    inputs.validate()?;
    let (m, n, dv) = (inputs.query_len(), inputs.kv_len(), inputs.value_dim());
    let kt = k_transposed(inputs.k);
    let mut o = Matrix::zeros(m, dv);
    let mut l = Vec::with_capacity(m);
    let mut s = vec![0.0; CHUNK_ROWS.min(m) * n];
    for r0 in (0..m).step_by(CHUNK_ROWS) {
        let r1 = (r0 + CHUNK_ROWS).min(m);
        score_rows(inputs, &kt, r0, r1, &mut s);
        for r in 0..r1 - r0 {
            l.push(softmax_row(&mut s[r * n..(r + 1) * n]));
        }
        let out = &mut o.as_mut_slice()[r0 * dv..r1 * dv];
        gemm_acc(r1 - r0, dv, n, &s, n, inputs.v.as_slice(), dv, out, dv);
    }
    Ok((o, l))
}

/// Gradients of a loss with upstream gradient `d_o`, given the forward `P`.
///
/// `dV = PᵀdO`, `dP = dO·Vᵀ`, `dS = P∘(dP − rowsum(P∘dP))`, `dQ = α·dS·K`,
/// `dK = α·dSᵀQ`.
pub fn std_attention_bwd(
    inputs: &AttentionInputs,
    p: &Matrix,
    d_o: &Matrix,
) -> Result<AttentionGrads> {
    inputs.validate()?;
    let (m, n) = (inputs.query_len(), inputs.kv_len());
    if p.shape() != (m, n) {
        return Err(mismatch(
            "std_attention_bwd",
            format!("P is {:?}, expected ({m}, {n})", p.shape()),
        ));
    }
    if d_o.shape() != (m, inputs.value_dim()) {
        return Err(mismatch(
            "std_attention_bwd",
            format!(
                "dO is {:?}, expected ({m}, {})",
                d_o.shape(),
                inputs.value_dim()
            ),
        ));
    }
    let dv = matmul(&p.transpose(), d_o, false)?;
    let dp = matmul(d_o, inputs.v, true)?;
    let mut ds = Matrix::zeros(m, n);
    for i in 0..m {
        let (pr, dpr) = (p.row(i), dp.row(i));
        let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for (j, x) in ds.row_mut(i).iter_mut().enumerate() {
            *x = pr[j] * (dpr[j] - dot);
        }
    }
    let alpha = inputs.alpha;
    let dq = matmul(&ds, inputs.k, false)?.map(|x| alpha * x);
    let dk = matmul(&ds.transpose(), inputs.q, false)?.map(|x| alpha * x);
    Ok(AttentionGrads { dq, dk, dv })
}
