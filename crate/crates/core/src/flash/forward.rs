use serde::{Deserialize, Serialize};

use super::config::TileConfig;
use super::softmax::SoftmaxState;
use crate::dense::kernels::{gemm_acc, transpose_into};
use crate::dense::Matrix;
use crate::error::Result;
use crate::reference::AttentionInputs;

/// Statement order of the consumer mainloop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// One block at a time: `S`, softmax, rescale, `P̃V`.
    Basic,
    /// `S_next = QK_jᵀ` issued before `P̃_cur·V_{j−1}`; softmax of block `j`
    /// overlaps the second GEMM of block `j−1`.
    TwoStage,
    /// Two blocks in flight: the softmax of block `j−1` runs while the GEMMs
    /// for `S_j` and `P̃_{j−2}V_{j−2}` are outstanding, with a deferred rescale.
    ThreeStage,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Basic, Schedule::TwoStage, Schedule::ThreeStage];

    /// Fewest unmasked key blocks a query block needs for the pipelined
    /// mainloop; shorter rows use the basic schedule.
    pub fn min_blocks(self) -> usize {
        match self {
            Schedule::Basic => 1,
            Schedule::TwoStage => 2,
            Schedule::ThreeStage => 4,
        }
    }
}

/// Buffers live on top of the current `S`/`P̃` block at one mainloop step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LiveBuffers {
    pub s_next: usize,
    pub extra_p_tilde: usize,
    pub scale_o: usize,
}

/// What a forward run touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardAudit {
    /// Tiles `(i, j)` whose scores were computed, in order.
    pub visited: Vec<(usize, usize)>,
    /// Tiles skipped because the causal mask hides all of them.
    pub tiles_skipped: usize,
    /// Query blocks that ran the basic loop in place of the requested schedule.
    pub fallback_row_blocks: usize,
    /// One entry per pipelined mainloop iteration.
    pub mainloop: Vec<LiveBuffers>,
}

impl ForwardAudit {
    pub fn tiles_computed(&self) -> usize {
        self.visited.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub o: Matrix,
    /// Row logsumexp `L = m + ln ℓ`.
    pub l: Vec<f64>,
    pub audit: ForwardAudit,
}

struct Tiles<'a, 'b> {
    inputs: &'b AttentionInputs<'a>,
    cfg: TileConfig,
    kt: Vec<f64>,
}

struct RowBlock {
    row: usize,
    rows: usize,
    o: Vec<f64>,
    state: SoftmaxState,
    rescale: Vec<f64>,
}

impl Tiles<'_, '_> {
    /// Scores of tile `(i, j)`; masked entries are −∞.
    fn scores(&self, blk: &RowBlock, j: usize, audit: &mut ForwardAudit) -> Vec<f64> {
        let n = self.inputs.kv_len();
        let d = self.inputs.head_dim();
        let (c0, c1) = self.cfg.col_range(j, n);
        let cols = c1 - c0;
        let mut s = vec![0.0; blk.rows * cols];
        let q = &self.inputs.q.as_slice()[blk.row * d..];
        gemm_acc(blk.rows, cols, d, q, d, &self.kt[c0..], n, &mut s, cols);
        for r in 0..blk.rows {
            for (c, x) in s[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                *x = if self.inputs.masked(blk.row + r, c0 + c) {
                    f64::NEG_INFINITY
                } else {
                    self.inputs.alpha * *x
                };
            }
        }
        audit.visited.push((blk.row / self.cfg.block_rows, j));
        s
    }

    fn cols(&self, j: usize) -> usize {
        let (c0, c1) = self.cfg.col_range(j, self.inputs.kv_len());
        c1 - c0
    }

    /// `O += P̃·V_j`.
    fn accumulate_pv(&self, blk: &mut RowBlock, p: &[f64], j: usize) {
        let dv = self.inputs.value_dim();
        let (c0, _) = self.cfg.col_range(j, self.inputs.kv_len());
        let cols = self.cols(j);
        let v = &self.inputs.v.as_slice()[c0 * dv..];
        gemm_acc(blk.rows, dv, cols, p, cols, v, dv, &mut blk.o, dv);
    }

    fn softmax(&self, blk: &mut RowBlock, s: &mut [f64], j: usize) {
        let cols = self.cols(j);
        blk.state.step_in_place(s, cols, &mut blk.rescale);
    }
}

fn rescale_o(blk: &mut RowBlock, factors: &[f64], dv: usize) {
    for (row, &f) in blk.o.chunks_exact_mut(dv).zip(factors) {
        row.iter_mut().for_each(|x| *x *= f);
    }
}

fn basic_block(t: &Tiles, blk: &mut RowBlock, active: &[usize], audit: &mut ForwardAudit) {
    let dv = t.inputs.value_dim();
    for &j in active {
        let mut s = t.scores(blk, j, audit);
        t.softmax(blk, &mut s, j);
        let r = blk.rescale.clone();
        rescale_o(blk, &r, dv);
        t.accumulate_pv(blk, &s, j);
    }
}

fn two_stage_block(t: &Tiles, blk: &mut RowBlock, active: &[usize], audit: &mut ForwardAudit) {
    let dv = t.inputs.value_dim();
    let mut p_cur = t.scores(blk, active[0], audit);
    t.softmax(blk, &mut p_cur, active[0]);
    for w in active.windows(2) {
        let (prev, j) = (w[0], w[1]);
        let mut s_next = t.scores(blk, j, audit);
        audit.mainloop.push(LiveBuffers {
            s_next: 1,
            ..LiveBuffers::default()
        });
        t.accumulate_pv(blk, &p_cur, prev);
        t.softmax(blk, &mut s_next, j);
        let r = blk.rescale.clone();
        rescale_o(blk, &r, dv);
        p_cur = s_next;
    }
    t.accumulate_pv(blk, &p_cur, *active.last().unwrap());
}

fn three_stage_block(t: &Tiles, blk: &mut RowBlock, active: &[usize], audit: &mut ForwardAudit) {
    let dv = t.inputs.value_dim();
    let n = active.len();
    let mut p_pending = t.scores(blk, active[0], audit);
    t.softmax(blk, &mut p_pending, active[0]);
    let mut scale_o = blk.rescale.clone();
    let mut s_cur = t.scores(blk, active[1], audit);
    for idx in 2..n {
        let s_next = t.scores(blk, active[idx], audit);
        audit.mainloop.push(LiveBuffers {
            s_next: 1,
            extra_p_tilde: 1,
            scale_o: 1,
        });
        rescale_o(blk, &scale_o, dv);
        t.accumulate_pv(blk, &p_pending, active[idx - 2]);
        t.softmax(blk, &mut s_cur, active[idx - 1]);
        scale_o.copy_from_slice(&blk.rescale);
        p_pending = std::mem::replace(&mut s_cur, s_next);
    }
    rescale_o(blk, &scale_o, dv);
    t.accumulate_pv(blk, &p_pending, active[n - 2]);
    t.softmax(blk, &mut s_cur, active[n - 1]);
    let r = blk.rescale.clone();
    rescale_o(blk, &r, dv);
    t.accumulate_pv(blk, &s_cur, active[n - 1]);
}

/// Tiled forward under the given schedule. Rows with no unmasked entry give
/// a zero output row and `L = −∞`.
pub fn flash_fwd(
    inputs: &AttentionInputs,
    cfg: &TileConfig,
    schedule: Schedule,
) -> Result<ForwardOutput> {
    inputs.validate()?;
    cfg.validate()?;
    let (m, n, d, dv) = (
        inputs.query_len(),
        inputs.kv_len(),
        inputs.head_dim(),
        inputs.value_dim(),
    );
    let mut kt = vec![0.0; n * d];
    transpose_into(inputs.k.as_slice(), n, d, &mut kt);
    let tiles = Tiles {
        inputs,
        cfg: *cfg,
        kt,
    };
    let mut audit = ForwardAudit::default();
    let mut o = Matrix::zeros(m, dv);
    let mut l = Vec::with_capacity(m);
    let t_c = cfg.col_blocks(n);
    for i in 0..cfg.row_blocks(m) {
        let (r0, r1) = cfg.row_range(i, m);
        let active: Vec<usize> = (0..t_c)
            .filter(|&j| !cfg.fully_masked(inputs.causal, i, j, m))
            .collect();
        audit.tiles_skipped += t_c - active.len();
        let rows = r1 - r0;
        let mut blk = RowBlock {
            row: r0,
            rows,
            o: vec![0.0; rows * dv],
            state: SoftmaxState::new(rows),
            rescale: vec![0.0; rows],
        };
        if active.len() < schedule.min_blocks() {
            if schedule != Schedule::Basic {
                audit.fallback_row_blocks += 1;
            }
            basic_block(&tiles, &mut blk, &active, &mut audit);
        } else {
            match schedule {
                Schedule::Basic => basic_block(&tiles, &mut blk, &active, &mut audit),
                Schedule::TwoStage => two_stage_block(&tiles, &mut blk, &active, &mut audit),
                Schedule::ThreeStage => three_stage_block(&tiles, &mut blk, &active, &mut audit),
            }
        }
        // Epilogue: O = diag(ℓ)⁻¹·O, L = m + ln ℓ.
        let out = &mut o.as_mut_slice()[r0 * dv..r1 * dv];
        for (r, (dst, src)) in out
            .chunks_exact_mut(dv)
            .zip(blk.o.chunks_exact(dv))
            .enumerate()
        {
            let ell = blk.state.ell[r];
            for (x, &y) in dst.iter_mut().zip(src) {
                *x = if ell > 0.0 { y / ell } else { 0.0 };
            }
        }
        l.extend(blk.state.logsumexp());
    }
    Ok(ForwardOutput { o, l, audit })
}

pub fn flash_fwd_basic(inputs: &AttentionInputs, cfg: &TileConfig) -> Result<ForwardOutput> {
    flash_fwd(inputs, cfg, Schedule::Basic)
}

pub fn flash_fwd_2stage(inputs: &AttentionInputs, cfg: &TileConfig) -> Result<ForwardOutput> {
    flash_fwd(inputs, cfg, Schedule::TwoStage)
}

pub fn flash_fwd_3stage(inputs: &AttentionInputs, cfg: &TileConfig) -> Result<ForwardOutput> {
    flash_fwd(inputs, cfg, Schedule::ThreeStage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{sample_normal_matrix, Stream};
    use crate::reference::std_attention_fwd;

    fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        (
            sample_normal_matrix(n, d, seed, Stream::Query),
            sample_normal_matrix(n, d, seed, Stream::Key),
            sample_normal_matrix(n, d, seed, Stream::Value),
        )
    }

    fn max_l_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_block_matches_reference() {
        let (q, k, v) = qkv(40, 16, 1);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let cfg = TileConfig::new(64, 64).unwrap();
        let out = flash_fwd_basic(&inputs, &cfg).unwrap();
        let r = std_attention_fwd(&inputs).unwrap();
        assert!(out.o.max_abs_diff(&r.o) <= 1e-15);
        assert!(max_l_diff(&out.l, &r.l) <= 1e-15);
    }

    #[test]
    fn tiled_basic_matches_reference() {
        let (q, k, v) = qkv(128, 64, 2);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let cfg = TileConfig::new(32, 32).unwrap();
        let out = flash_fwd_basic(&inputs, &cfg).unwrap();
        let r = std_attention_fwd(&inputs).unwrap();
        assert!(out.o.max_abs_diff(&r.o) <= 1e-12);
        assert!(max_l_diff(&out.l, &r.l) <= 1e-12);
        assert_eq!(out.audit.tiles_computed(), 16);
    }

    #[test]
    fn causal_skips_upper_tiles() {
        let (q, k, v) = qkv(64, 16, 3);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap().with_causal(true);
        let cfg = TileConfig::new(16, 16).unwrap();
        let r = std_attention_fwd(&inputs).unwrap();
        for s in Schedule::ALL {
            let out = flash_fwd(&inputs, &cfg, s).unwrap();
            assert!(out.o.max_abs_diff(&r.o) <= 1e-12);
            assert!(max_l_diff(&out.l, &r.l) <= 1e-12);
            assert_eq!(out.audit.tiles_skipped, 6);
            assert_eq!(out.audit.tiles_computed(), 10);
            assert!(out
                .audit
                .visited
                .iter()
                .all(|&(i, j)| j * 16 <= i * 16 + 15));
        }
    }

    #[test]
    fn schedules_agree() {
        let (q, k, v) = qkv(256, 128, 4);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let cfg = TileConfig::new(64, 64).unwrap();
        let basic = flash_fwd_basic(&inputs, &cfg).unwrap();
        let two = flash_fwd_2stage(&inputs, &cfg).unwrap();
        assert!(two.o.max_abs_diff(&basic.o) <= 1e-12);
        let (q, k, v) = qkv(512, 64, 5);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let basic = flash_fwd_basic(&inputs, &cfg).unwrap();
        let three = flash_fwd_3stage(&inputs, &cfg).unwrap();
        assert!(three.o.max_abs_diff(&basic.o) <= 1e-12);
        assert!(max_l_diff(&three.l, &basic.l) <= 1e-12);
    }

    #[test]
    fn short_rows_fall_back_bit_for_bit() {
        let (q, k, v) = qkv(48, 8, 6);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let one = TileConfig::new(16, 64).unwrap();
        let basic = flash_fwd_basic(&inputs, &one).unwrap();
        let two = flash_fwd_2stage(&inputs, &one).unwrap();
        assert_eq!(two.o, basic.o);
        assert_eq!(two.l, basic.l);
        assert_eq!(two.audit.fallback_row_blocks, 3);

        let three_blocks = TileConfig::new(16, 16).unwrap();
        let basic = flash_fwd_basic(&inputs, &three_blocks).unwrap();
        let three = flash_fwd_3stage(&inputs, &three_blocks).unwrap();
        assert_eq!(three.o, basic.o);
        assert!(three.audit.mainloop.is_empty());
    }

    #[test]
    fn live_buffer_audit() {
        let (q, k, v) = qkv(64, 8, 7);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let cfg = TileConfig::new(32, 8).unwrap();
        let two = flash_fwd_2stage(&inputs, &cfg).unwrap();
        // T_c = 8: seven mainloop iterations per query block.
        assert_eq!(two.audit.mainloop.len(), 2 * 7);
        assert!(two.audit.mainloop.iter().all(|b| *b
            == LiveBuffers {
                s_next: 1,
                extra_p_tilde: 0,
                scale_o: 0
            }));
        let three = flash_fwd_3stage(&inputs, &cfg).unwrap();
        assert_eq!(three.audit.mainloop.len(), 2 * 6);
        assert!(three.audit.mainloop.iter().all(|b| *b
            == LiveBuffers {
                s_next: 1,
                extra_p_tilde: 1,
                scale_o: 1
            }));
    }

    #[test]
    fn ragged_tails_and_block_invariance() {
        let (q, k, v) = qkv(77, 32, 8);
        for causal in [false, true] {
            let inputs = AttentionInputs::new(&q, &k, &v)
                .unwrap()
                .with_causal(causal);
            let r = std_attention_fwd(&inputs).unwrap();
            for (br, bc) in [(16, 16), (32, 16), (16, 64), (64, 32), (5, 7)] {
                let cfg = TileConfig::new(br, bc).unwrap();
                for s in Schedule::ALL {
                    let out = flash_fwd(&inputs, &cfg, s).unwrap();
                    assert!(out.o.max_abs_diff(&r.o) <= 1e-12, "{br}x{bc} {s:?}");
                    assert!(max_l_diff(&out.l, &r.l) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn running_max_is_monotone_and_sum_positive() {
        let (q, k, v) = qkv(32, 8, 9);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap().with_causal(true);
        let cfg = TileConfig::new(8, 8).unwrap();
        let d = inputs.head_dim();
        let mut kt = vec![0.0; 32 * d];
        transpose_into(k.as_slice(), 32, d, &mut kt);
        let t = Tiles {
            inputs: &inputs,
            cfg,
            kt,
        };
        let mut audit = ForwardAudit::default();
        let mut blk = RowBlock {
            row: 24,
            rows: 8,
            o: vec![0.0; 64],
            state: SoftmaxState::new(8),
            rescale: vec![0.0; 8],
        };
        let mut prev = blk.state.m.clone();
        for j in 0..4 {
            let mut s = t.scores(&blk, j, &mut audit);
            t.softmax(&mut blk, &mut s, j);
            assert!(blk.state.m.iter().zip(&prev).all(|(a, b)| a >= b));
            assert!(blk.state.ell.iter().all(|&x| x > 0.0));
            prev = blk.state.m.clone();
        }
    }
}
