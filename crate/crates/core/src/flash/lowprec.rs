//! Tiled forward on emulated low-precision operands: scores accumulated in
//! fp32 and descaled per entry, online softmax in fp32, `P̃` stored in a
//! narrow format for the PV product, fp32 output accumulator.

use super::config::TileConfig;
use super::forward::{ForwardAudit, ForwardOutput};
use crate::dense::kernels::gemm_acc;
use crate::dense::Matrix;
use crate::error::{invalid, Result};
use crate::formats::lowp::{round32, to_f32, to_f32_transposed};
use crate::formats::{cast, FloatFormat, QuantizedTensor};
use crate::reference::AttentionInputs;

/// Storage of `P̃` for the second GEMM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PTildeFormat {
    /// Rounded to fp16, unit scale.
    Fp16,
    /// e4m3 with one scale per `(i, j)` tile, `amax/448`.
    E4m3PerTile,
    /// e4m3 with the fixed scale `1/448` (`P̃ ≤ 1`).
    E4m3Fixed,
}

/// Codes and per-row scales of Q, K, V in f32 carriers.
pub(crate) struct LowPrecOperands {
    q: Vec<f32>,
    q_scale: Vec<f64>,
    kt: Vec<f32>,
    k_scale: Vec<f64>,
    v: Vec<f32>,
    v_scale: Vec<f64>,
}

fn row_scales(t: &QuantizedTensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row_scale(i)).collect()
}

impl LowPrecOperands {
    /// V's scale must be constant within each key block, since it is applied
    /// once per PV product.
    pub(crate) fn new(
        q: &QuantizedTensor,
        k: &QuantizedTensor,
        v: &QuantizedTensor,
        cfg: &TileConfig,
    ) -> Result<Self> {
        let v_scale = row_scales(v);
        for block in v_scale.chunks(cfg.block_cols) {
            if block.iter().any(|&s| s != block[0]) {
                return Err(invalid("v", "scale varies within a key block"));
            }
        }
        Ok(LowPrecOperands {
            q: to_f32(q.codes()),
            q_scale: row_scales(q),
            kt: to_f32_transposed(k.codes()),
            k_scale: row_scales(k),
            v: to_f32(v.codes()),
            v_scale,
        })
    }
}

pub(crate) fn tiled_forward_lowp(
    inputs: &AttentionInputs,
    ops: &LowPrecOperands,
    cfg: &TileConfig,
    p_format: PTildeFormat,
    output: Option<FloatFormat>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let (m, n, d, dv) = (
        inputs.query_len(),
        inputs.kv_len(),
        inputs.head_dim(),
        inputs.value_dim(),
    );
    let (t_r, t_c) = (cfg.row_blocks(m), cfg.col_blocks(n));
    let (br, bc) = (cfg.block_rows, cfg.block_cols);
    let mut audit = ForwardAudit::default();
    let mut out = vec![0.0f64; m * dv];
    let mut lse = Vec::with_capacity(m);

    let mut s = vec![0.0f32; br * bc];
    let mut pv = vec![0.0f32; br * dv];
    let mut o = vec![0.0f32; br * dv];
    let mut mrow = vec![0.0f32; br];
    let mut ell = vec![0.0f32; br];
    let mut rescale = vec![0.0f32; br];

    for i in 0..t_r {
        let (r0, r1) = cfg.row_range(i, m);
        let rows = r1 - r0;
        o[..rows * dv].iter_mut().for_each(|x| *x = 0.0);
        mrow[..rows].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
        ell[..rows].iter_mut().for_each(|x| *x = 0.0);
        for j in 0..t_c {
            if cfg.fully_masked(inputs.causal, i, j, m) {
                audit.tiles_skipped += 1;
                continue;
            }
            audit.visited.push((i, j));
            let (c0, c1) = cfg.col_range(j, n);
            let cols = c1 - c0;
            let s = &mut s[..rows * cols];
            s.iter_mut().for_each(|x| *x = 0.0);
            gemm_acc(
                rows,
                cols,
                d,
                &ops.q[r0 * d..],
                d,
                &ops.kt[c0..],
                n,
                s,
                cols,
            );

            let mut amax = 0.0f32;
            for r in 0..rows {
                let qs = ops.q_scale[r0 + r] * inputs.alpha;
                let row = &mut s[r * cols..(r + 1) * cols];
                for (c, x) in row.iter_mut().enumerate() {
                    *x = if inputs.masked(r0 + r, c0 + c) {
                        f32::NEG_INFINITY
                    } else {
                        (*x as f64 * (qs * ops.k_scale[c0 + c])) as f32
                    };
                }
                let m_old = mrow[r];
                let m_new = row.iter().fold(m_old, |a, &b| a.max(b));
                if m_new == f32::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    rescale[r] = 0.0;
                    continue;
                }
                let mut sum = 0.0f32;
                for x in row.iter_mut() {
                    *x = ((*x - m_new) as f64).exp() as f32;
                    sum += *x;
                    amax = amax.max(*x);
                }
                rescale[r] = ((m_old - m_new) as f64).exp() as f32;
                ell[r] = ell[r] * rescale[r] + sum;
                mrow[r] = m_new;
            }

            let sp = match p_format {
                PTildeFormat::Fp16 => {
                    s.iter_mut()
                        .for_each(|x| *x = round32(*x as f64, FloatFormat::Fp16));
                    1.0
                }
                PTildeFormat::E4m3PerTile | PTildeFormat::E4m3Fixed => {
                    let sp = match p_format {
                        PTildeFormat::E4m3PerTile if amax > 0.0 => {
                            amax as f64 / FloatFormat::Fp8E4M3.max_finite()
                        }
                        PTildeFormat::E4m3PerTile => 1.0,
                        _ => 1.0 / FloatFormat::Fp8E4M3.max_finite(),
                    };
                    s.iter_mut()
                        .for_each(|x| *x = round32(*x as f64 / sp, FloatFormat::Fp8E4M3));
                    sp
                }
            };
            let pv = &mut pv[..rows * dv];
            pv.iter_mut().for_each(|x| *x = 0.0);
            gemm_acc(rows, dv, cols, s, cols, &ops.v[c0 * dv..], dv, pv, dv);
            let descale = sp * ops.v_scale[c0];
            for r in 0..rows {
                let f = rescale[r];
                for (x, &y) in o[r * dv..(r + 1) * dv]
                    .iter_mut()
                    .zip(&pv[r * dv..(r + 1) * dv])
                {
                    *x = *x * f + (y as f64 * descale) as f32;
                }
            }
        }
        for r in 0..rows {
            let l = ell[r];
            let dst = &mut out[(r0 + r) * dv..(r0 + r + 1) * dv];
            for (x, &y) in dst.iter_mut().zip(&o[r * dv..(r + 1) * dv]) {
                let v = if l > 0.0 { y / l } else { 0.0 };
                *x = match output {
                    Some(f) => round32(v as f64, f) as f64,
                    None => v as f64,
                };
            }
            lse.push(if l > 0.0 {
                mrow[r] as f64 + (l as f64).ln()
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    Ok(ForwardOutput {
        o: Matrix::from_vec(m, dv, out)?,
        l: lse,
        audit,
    })
}

/// Tiled forward with fp16 inputs: scores and softmax in fp32, `P̃` rounded
/// to fp16 for the PV product, fp32 output accumulator, output rounded to fp16.
pub fn flash_fwd_fp16(inputs: &AttentionInputs, cfg: &TileConfig) -> Result<ForwardOutput> {
    inputs.validate()?;
    let f = FloatFormat::Fp16;
    let ops = LowPrecOperands::new(
        &cast(inputs.q, f)?,
        &cast(inputs.k, f)?,
        &cast(inputs.v, f)?,
        cfg,
    )?;
    tiled_forward_lowp(inputs, &ops, cfg, PTildeFormat::Fp16, Some(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{rmse, sample_normal_matrix, sample_outlier_matrix, Stream};
    use crate::formats::round_to;
    use crate::reference::{baseline_lowprec_attention, std_attention_fwd, std_attention_output};

    #[test]
    fn fp16_flash_close_to_exact() {
        let q = sample_normal_matrix(70, 32, 1, Stream::Query);
        let k = sample_normal_matrix(70, 32, 1, Stream::Key);
        let v = sample_normal_matrix(70, 16, 1, Stream::Value);
        for causal in [false, true] {
            let inputs = AttentionInputs::new(&q, &k, &v)
                .unwrap()
                .with_causal(causal);
            let exact = std_attention_fwd(&inputs).unwrap();
            let cfg = TileConfig::new(16, 32).unwrap();
            let out = flash_fwd_fp16(&inputs, &cfg).unwrap();
            assert!(out.o.max_abs_diff(&exact.o) <= 2e-3);
            assert!(out
                .o
                .as_slice()
                .iter()
                .all(|&x| round_to(x, FloatFormat::Fp16) == x));
            for (a, b) in out.l.iter().zip(&exact.l) {
                assert!((a - b).abs() <= 1e-2);
            }
            if causal {
                assert_eq!(out.audit.tiles_skipped, 6);
            }
        }
    }

    #[test]
    fn fp16_flash_beats_fp16_baseline_on_outliers() {
        let q = sample_outlier_matrix(256, 128, 2, Stream::Query);
        let k = sample_outlier_matrix(1024, 128, 2, Stream::Key);
        let v = sample_outlier_matrix(1024, 128, 2, Stream::Value);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let (exact, _) = std_attention_output(&inputs).unwrap();
        let flash = flash_fwd_fp16(&inputs, &TileConfig::default()).unwrap();
        let base = baseline_lowprec_attention(&inputs, FloatFormat::Fp16).unwrap();
        let ef = rmse(&flash.o, &exact).unwrap();
        let eb = rmse(&base, &exact).unwrap();
        assert!(ef < eb, "flash {ef} baseline {eb}");
    }

    #[test]
    fn v_scale_must_be_blockwise() {
        let m = sample_normal_matrix(32, 8, 3, Stream::Value);
        let q = cast(&m, FloatFormat::Fp16).unwrap();
        let v = crate::formats::quantize_per_block(&m, 8, FloatFormat::Fp8E4M3).unwrap();
        let cfg = TileConfig::new(16, 16).unwrap();
        assert!(LowPrecOperands::new(&q, &q, &v, &cfg).is_err());
        assert!(LowPrecOperands::new(&q, &q, &v, &TileConfig::new(16, 8).unwrap()).is_ok());
    }
}
