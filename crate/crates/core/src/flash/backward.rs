use std::collections::VecDeque;

use super::config::TileConfig;
use crate::dense::kernels::{gemm_acc, transpose_into};
use crate::dense::Matrix;
use crate::error::{mismatch, Result};
use crate::reference::{AttentionGrads, AttentionInputs};

/// `D = rowsum(dO ∘ O)`.
pub fn bwd_preprocess(d_o: &Matrix, o: &Matrix) -> Result<Vec<f64>> {
    if d_o.shape() != o.shape() {
        return Err(mismatch(
            "bwd_preprocess",
            format!("dO is {:?}, O is {:?}", d_o.shape(), o.shape()),
        ));
    }
    Ok((0..o.rows())
        .map(|i| d_o.row(i).iter().zip(o.row(i)).map(|(a, b)| a * b).sum())
        .collect())
}

/// Order in which the backward pass touched tiles and flushed `dQ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackwardAudit {
    pub visited: Vec<(usize, usize)>,
    pub tiles_skipped: usize,
    /// `(i, j)` of each `dQ_i += dQ_i^(j)` applied by the writer, in order.
    pub dq_adds: Vec<(usize, usize)>,
}

/// Single writer that owns `dQ`. Consumers hand it partial tiles; it adds
/// them in arrival order, which is ascending `j` for every `i`.
struct DqWriter {
    dq: Matrix,
    queue: VecDeque<(usize, usize, Vec<f64>)>,
    block_rows: usize,
}

impl DqWriter {
    fn submit(&mut self, i: usize, j: usize, tile: Vec<f64>) {
        self.queue.push_back((i, j, tile));
    }

    fn drain(&mut self, audit: &mut BackwardAudit) {
        let d = self.dq.cols();
        while let Some((i, j, tile)) = self.queue.pop_front() {
            let r0 = i * self.block_rows;
            let dst = &mut self.dq.as_mut_slice()[r0 * d..r0 * d + tile.len()];
            dst.iter_mut().zip(&tile).for_each(|(x, y)| *x += y);
            audit.dq_adds.push((i, j));
        }
    }
}

/// Blocked backward pass: outer loop over key/value blocks, inner loop over
/// query blocks, recomputing `P` from `L`.
pub fn flash_bwd(
    inputs: &AttentionInputs,
    o: &Matrix,
    d_o: &Matrix,
    l: &[f64],
    cfg: &TileConfig,
) -> Result<AttentionGrads> {
    flash_bwd_with_audit(inputs, o, d_o, l, cfg).map(|(g, _)| g)
}

pub fn flash_bwd_with_audit(
    inputs: &AttentionInputs,
    o: &Matrix,
    d_o: &Matrix,
    l: &[f64],
    cfg: &TileConfig,
) -> Result<(AttentionGrads, BackwardAudit)> {
    inputs.validate()?;
    cfg.validate()?;
    let (m, n, d, dv) = (
        inputs.query_len(),
        inputs.kv_len(),
        inputs.head_dim(),
        inputs.value_dim(),
    );
    if o.shape() != (m, dv) || l.len() != m {
        return Err(mismatch(
            "flash_bwd",
            format!(
                "O is {:?} and L has {} entries for {m} query rows",
                o.shape(),
                l.len()
            ),
        ));
    }
    let dd = bwd_preprocess(d_o, o)?;
    let alpha = inputs.alpha;
    let mut kt = vec![0.0; n * d];
    transpose_into(inputs.k.as_slice(), n, d, &mut kt);
    let mut vt = vec![0.0; n * dv];
    transpose_into(inputs.v.as_slice(), n, dv, &mut vt);

    let mut dk = Matrix::zeros(n, d);
    let mut dv_out = Matrix::zeros(n, dv);
    let mut writer = DqWriter {
        dq: Matrix::zeros(m, d),
        queue: VecDeque::new(),
        block_rows: cfg.block_rows,
    };
    let mut audit = BackwardAudit::default();
    let (t_r, t_c) = (cfg.row_blocks(m), cfg.col_blocks(n));

    for j in 0..t_c {
        let (c0, c1) = cfg.col_range(j, n);
        let cols = c1 - c0;
        let mut dk_j = vec![0.0; cols * d];
        let mut dv_j = vec![0.0; cols * dv];
        for i in 0..t_r {
            if cfg.fully_masked(inputs.causal, i, j, m) {
                audit.tiles_skipped += 1;
                continue;
            }
            audit.visited.push((i, j));
            let (r0, r1) = cfg.row_range(i, m);
            let rows = r1 - r0;
            let q_i = &inputs.q.as_slice()[r0 * d..];
            let do_i = &d_o.as_slice()[r0 * dv..];

            // P = exp(αQ_iK_jᵀ − L_i)
            let mut p = vec![0.0; rows * cols];
            gemm_acc(rows, cols, d, q_i, d, &kt[c0..], n, &mut p, cols);
            for r in 0..rows {
                let li = l[r0 + r];
                for (c, x) in p[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    *x = if li == f64::NEG_INFINITY || inputs.masked(r0 + r, c0 + c) {
                        0.0
                    } else {
                        (alpha * *x - li).exp()
                    };
                }
            }
            let mut pt = vec![0.0; rows * cols];
            transpose_into(&p, rows, cols, &mut pt);
            // dV_j += Pᵀ dO_i
            gemm_acc(cols, dv, rows, &pt, rows, do_i, dv, &mut dv_j, dv);
            // dP = dO_i V_jᵀ, then dS = P ∘ (dP − D_i) in place
            let mut ds = vec![0.0; rows * cols];
            gemm_acc(rows, cols, dv, do_i, dv, &vt[c0..], n, &mut ds, cols);
            for r in 0..rows {
                let di = dd[r0 + r];
                for (x, &pv) in ds[r * cols..(r + 1) * cols].iter_mut().zip(&p[r * cols..]) {
                    *x = pv * (*x - di);
                }
            }
            // dK_j += dSᵀ Q_i (α applied once per block below)
            let mut dst = pt;
            transpose_into(&ds, rows, cols, &mut dst);
            gemm_acc(cols, d, rows, &dst, rows, q_i, d, &mut dk_j, d);
            // dQ_i^(j) = α dS K_j, handed to the writer
            let mut dq_local = vec![0.0; rows * d];
            gemm_acc(
                rows,
                d,
                cols,
                &ds,
                cols,
                &inputs.k.as_slice()[c0 * d..],
                d,
                &mut dq_local,
                d,
            );
            dq_local.iter_mut().for_each(|x| *x *= alpha);
            writer.submit(i, j, dq_local);
        }
        writer.drain(&mut audit);
        for (dst, src) in dk.as_mut_slice()[c0 * d..c1 * d].iter_mut().zip(&dk_j) {
            *dst = alpha * src;
        }
        dv_out.as_mut_slice()[c0 * dv..c1 * dv].copy_from_slice(&dv_j);
    }
    let grads = AttentionGrads {
        dq: writer.dq,
        dk,
        dv: dv_out,
    };
    Ok((grads, audit))
}
