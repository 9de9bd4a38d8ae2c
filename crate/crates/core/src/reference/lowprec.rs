use super::AttentionInputs;
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::formats::lowp::{gemm32, round32, to_f32, to_f32_transposed};
use crate::formats::{cast, quantize_per_tensor, FloatFormat, QuantizedTensor};

const CHUNK_ROWS: usize = 64;
const F16: FloatFormat = FloatFormat::Fp16;

/// Standard (non-tiled) attention in low precision, materializing S and P.
///
/// Both variants accumulate matmuls in fp32 and hold every elementwise
/// softmax intermediate in fp16: `S`, `S − rowmax`, `exp(·)` and `P` are each
/// rounded to fp16, the row sum is an fp32 accumulation.
///
/// * `fp16`: Q, K, V rounded to fp16; `S` rounded to fp16 out of the
///   accumulator and again after scaling by α; `O` rounded to fp16.
/// * `fp8e4m3`: Q, K, V quantized per tensor; `S` descaled and rounded to
///   fp16; `P` is quantized per tensor to e4m3 before the PV product;
///   `O` rounded to fp16.
pub fn baseline_lowprec_attention(inputs: &AttentionInputs, format: FloatFormat) -> Result<Matrix> {
    inputs.validate()?;
    let quantize: fn(&Matrix) -> Result<QuantizedTensor> = match format {
        FloatFormat::Fp16 => |m| cast(m, F16),
        FloatFormat::Fp8E4M3 => |m| quantize_per_tensor(m, FloatFormat::Fp8E4M3),
        other => {
            return Err(Error::UnsupportedFormat {
                op: "baseline_lowprec_attention",
                format: other.to_string(),
            })
        }
    };
    let (q, k, v) = (
        quantize(inputs.q)?,
        quantize(inputs.k)?,
        quantize(inputs.v)?,
    );
    let (m, n, d, dv) = (
        inputs.query_len(),
        inputs.kv_len(),
        inputs.head_dim(),
        inputs.value_dim(),
    );
    let qs = to_f32(q.codes());
    let kt = to_f32_transposed(k.codes());
    let vs = to_f32(v.codes());
    let qk_scale = q.row_scale(0) * k.row_scale(0);
    let fp8 = format == FloatFormat::Fp8E4M3;

    let mut out = vec![0.0f64; m * dv];
    // The fp8 path keeps all of P for its per-tensor scale.
    let mut p_all = if fp8 { vec![0.0f32; m * n] } else { Vec::new() };
    let mut s = vec![0.0f32; CHUNK_ROWS.min(m) * n];
    let mut o = vec![0.0f32; CHUNK_ROWS.min(m) * dv];
    let mut p_amax = 0.0f32;

    for r0 in (0..m).step_by(CHUNK_ROWS) {
        let r1 = (r0 + CHUNK_ROWS).min(m);
        let rows = r1 - r0;
        gemm32(rows, n, d, &qs[r0 * d..], d, &kt, n, &mut s);
        for r in 0..rows {
            let row = &mut s[r * n..(r + 1) * n];
            for (j, x) in row.iter_mut().enumerate() {
                *x = if inputs.masked(r0 + r, j) {
                    f32::NEG_INFINITY
                } else if fp8 {
                    round32(*x as f64 * qk_scale * inputs.alpha, F16)
                } else {
                    round32(round32(*x as f64, F16) as f64 * inputs.alpha, F16)
                };
            }
            softmax_row_fp16(row);
            if fp8 {
                p_amax = row.iter().fold(p_amax, |a, &b| a.max(b));
            }
        }
        if fp8 {
            p_all[r0 * n..r1 * n].copy_from_slice(&s[..rows * n]);
        } else {
            gemm32(rows, dv, n, &s, n, &vs, dv, &mut o);
            for (dst, &x) in out[r0 * dv..r1 * dv].iter_mut().zip(&o[..rows * dv]) {
                *dst = round_to_f16(x as f64);
            }
        }
    }

    if fp8 {
        let sp = if p_amax == 0.0 {
            1.0
        } else {
            p_amax as f64 / FloatFormat::Fp8E4M3.max_finite()
        };
        p_all
            .iter_mut()
            .for_each(|x| *x = round32(*x as f64 / sp, FloatFormat::Fp8E4M3));
        let pv_scale = sp * v.row_scale(0);
        for r0 in (0..m).step_by(CHUNK_ROWS) {
            let r1 = (r0 + CHUNK_ROWS).min(m);
            gemm32(r1 - r0, dv, n, &p_all[r0 * n..], n, &vs, dv, &mut o);
            for (dst, &x) in out[r0 * dv..r1 * dv].iter_mut().zip(&o[..(r1 - r0) * dv]) {
                *dst = round_to_f16(x as f64 * pv_scale);
            }
        }
    }
    Matrix::from_vec(m, dv, out)
}

#[inline]
fn round_to_f16(x: f64) -> f64 {
    crate::formats::round_to(x, F16)
}

/// Row softmax with fp16 elementwise intermediates and an fp32 sum.
fn softmax_row_fp16(row: &mut [f32]) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    if m == f32::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        let shifted = round32((*x - m) as f64, F16);
        *x = round32((shifted as f64).exp(), F16);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = round32(*x as f64 / sum as f64, F16);
    }
}
