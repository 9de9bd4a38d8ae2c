use super::round::{round_to, FloatFormat};
use crate::dense::kernels::gemm_acc;
use crate::dense::Matrix;
use crate::error::{invalid, mismatch, Error, Result};

/// How the codes of a [`QuantizedTensor`] map back to real values.
#[derive(Clone, Debug, PartialEq)]
pub enum Scales {
    PerTensor(f64),
    /// One scale per group of `block_rows` consecutive rows; the last group
    /// may be shorter.
    PerRowBlock {
        block_rows: usize,
        scales: Vec<f64>,
    },
}

/// Codes already rounded into `format`, plus the scales that dequantize them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    codes: Matrix,
    format: FloatFormat,
    scales: Scales,
}

impl QuantizedTensor {
    /// Assembles a tensor from parts, checking that every code is a finite
    /// member of `format` and that the scales cover every row.
    pub fn new(codes: Matrix, format: FloatFormat, scales: Scales) -> Result<Self> {
        for (idx, &c) in codes.as_slice().iter().enumerate() {
            if !c.is_finite() || round_to(c, format) != c {
                return Err(invalid(
                    "codes",
                    format!("entry {idx} ({c}) is not a finite {format} value"),
                ));
            }
        }
        match &scales {
            Scales::PerTensor(s) => check_scale(*s)?,
            Scales::PerRowBlock { block_rows, scales } => {
                if *block_rows == 0 {
                    return Err(invalid("block_rows", "must be at least 1"));
                }
                if scales.len() != codes.rows().div_ceil(*block_rows) {
                    return Err(mismatch(
                        "QuantizedTensor",
                        format!(
                            "{} scales for {} rows in blocks of {block_rows}",
                            scales.len(),
                            codes.rows()
                        ),
                    ));
                }
                scales.iter().try_for_each(|&s| check_scale(s))?;
            }
        }
        Ok(QuantizedTensor {
            codes,
            format,
            scales,
        })
    }

    pub fn codes(&self) -> &Matrix {
        &self.codes
    }

    pub fn format(&self) -> FloatFormat {
        self.format
    }

    pub fn scales(&self) -> &Scales {
        &self.scales
    }

    pub fn rows(&self) -> usize {
        self.codes.rows()
    }

    pub fn cols(&self) -> usize {
        self.codes.cols()
    }

    pub fn block_rows(&self) -> Option<usize> {
        match self.scales {
            Scales::PerTensor(_) => None,
            Scales::PerRowBlock { block_rows, .. } => Some(block_rows),
        }
    }

    /// Scale that owns row `i`.
    pub fn row_scale(&self, i: usize) -> f64 {
        match &self.scales {
            Scales::PerTensor(s) => *s,
            Scales::PerRowBlock { block_rows, scales } => scales[i / block_rows],
        }
    }

    /// The single scale shared by all rows, if there is one.
    fn uniform_scale(&self) -> Option<f64> {
        match &self.scales {
            Scales::PerTensor(s) => Some(*s),
            Scales::PerRowBlock { scales, .. } => {
                let first = *scales.first()?;
                scales.iter().all(|&s| s == first).then_some(first)
            }
        }
    }
}

fn check_scale(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(invalid(
            "scale",
            format!("{s} is not a positive finite number"),
        ))
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Empty("quantize"));
    }
    match m.find_non_finite() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn scale_for(amax: f64, f: FloatFormat) -> f64 {
    if amax == 0.0 {
        1.0
    } else {
        amax / f.max_finite()
    }
}

fn encode_rows(
    m: &Matrix,
    rows: std::ops::Range<usize>,
    scale: f64,
    f: FloatFormat,
    out: &mut Matrix,
) {
    for i in rows {
        for (o, &x) in out.row_mut(i).iter_mut().zip(m.row(i)) {
            *o = round_to(x / scale, f);
        }
    }
}

/// One scale for the whole tensor: `amax / max_finite` (1 for an all-zero input).
pub fn quantize_per_tensor(m: &Matrix, f: FloatFormat) -> Result<QuantizedTensor> {
    check_finite(m)?;
    let scale = scale_for(m.amax(), f);
    let mut codes = Matrix::zeros(m.rows(), m.cols());
    encode_rows(m, 0..m.rows(), scale, f, &mut codes);
    Ok(QuantizedTensor {
        codes,
        format: f,
        scales: Scales::PerTensor(scale),
    })
}

/// One scale per `block_rows` rows, each from that block's own amax.
pub fn quantize_per_block(
    m: &Matrix,
    block_rows: usize,
    f: FloatFormat,
) -> Result<QuantizedTensor> {
    if block_rows == 0 {
        return Err(invalid("block_rows", "must be at least 1"));
    }
    check_finite(m)?;
    let mut codes = Matrix::zeros(m.rows(), m.cols());
    let mut scales = Vec::with_capacity(m.rows().div_ceil(block_rows));
    for start in (0..m.rows()).step_by(block_rows) {
        let end = (start + block_rows).min(m.rows());
        let amax = m.as_slice()[start * m.cols()..end * m.cols()]
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        let scale = scale_for(amax, f);
        encode_rows(m, start..end, scale, f, &mut codes);
        scales.push(scale);
    }
    Ok(QuantizedTensor {
        codes,
        format: f,
        scales: Scales::PerRowBlock { block_rows, scales },
    })
}

/// Plain rounding into `f` with unit scale, as used for fp16 inputs.
pub fn cast(m: &Matrix, f: FloatFormat) -> Result<QuantizedTensor> {
    check_finite(m)?;
    Ok(QuantizedTensor {
        codes: m.map(|x| round_to(x, f)),
        format: f,
        scales: Scales::PerTensor(1.0),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let mut out = q.codes.clone();
    for i in 0..out.rows() {
        let s = q.row_scale(i);
        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    out
}

/// `a · b` (or `a · bᵀ`) computed on the codes with every multiply-add
/// rounded once into `acc`, then multiplied by the operand scales.
///
/// With `transpose_b` the reduction runs along the rows of both operands, so
/// per-row-block scales on either side are fine. Without it, `b`'s rows are
/// the reduction dimension and must share a single scale.
pub fn emulated_matmul(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    transpose_b: bool,
    acc: FloatFormat,
) -> Result<Matrix> {
    if !matches!(acc, FloatFormat::Fp32 | FloatFormat::Fp64) {
        return Err(Error::UnsupportedFormat {
            op: "emulated_matmul accumulator",
            format: acc.to_string(),
        });
    }
    if acc == FloatFormat::Fp32 && (a.format == FloatFormat::Fp64 || b.format == FloatFormat::Fp64)
    {
        return Err(Error::UnsupportedFormat {
            op: "emulated_matmul with fp32 accumulation",
            format: "fp64 operand".into(),
        });
    }
    let (m, k) = a.codes.shape();
    let (n, kb) = if transpose_b {
        b.codes.shape()
    } else {
        let (r, c) = b.codes.shape();
        (c, r)
    };
    if k != kb {
        return Err(mismatch(
            "emulated_matmul",
            format!(
                "{m}x{k} times {}x{}{}",
                b.rows(),
                b.cols(),
                if transpose_b { "ᵀ" } else { "" }
            ),
        ));
    }
    let b_uniform =
        if transpose_b {
            None
        } else {
            Some(b.uniform_scale().ok_or_else(|| {
                invalid("b", "per-row-block scales along the reduction dimension")
            })?)
        };

    // b laid out k×n so the kernel streams rows of b.
    let bt = if transpose_b {
        b.codes.transpose()
    } else {
        b.codes.clone()
    };
    let exact_products = a.format.precision() + b.format.precision() <= acc.precision();
    let mut raw = vec![0.0f64; m * n];
    match (acc, exact_products) {
        (FloatFormat::Fp32, true) => {
            // Products are exact in f32, so `c + a*b` rounds once: a fused step.
            let a32: Vec<f32> = a.codes.as_slice().iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = bt.as_slice().iter().map(|&x| x as f32).collect();
            let mut c = vec![0.0f32; m * n];
            gemm_acc(m, n, k, &a32, k, &b32, n, &mut c, n);
            raw.iter_mut().zip(&c).for_each(|(r, &v)| *r = v as f64);
        }
        (FloatFormat::Fp64, true) => {
            gemm_acc(
                m,
                n,
                k,
                a.codes.as_slice(),
                k,
                bt.as_slice(),
                n,
                &mut raw,
                n,
            );
        }
        (FloatFormat::Fp32, false) => {
            for i in 0..m {
                let ar = a.codes.row(i);
                for j in 0..n {
                    let mut s = 0.0f32;
                    for (kk, &x) in ar.iter().enumerate() {
                        s = (x as f32).mul_add(bt[(kk, j)] as f32, s);
                    }
                    raw[i * n + j] = s as f64;
                }
            }
        }
        _ => {
            for i in 0..m {
                let ar = a.codes.row(i);
                for j in 0..n {
                    let mut s = 0.0f64;
                    for (kk, &x) in ar.iter().enumerate() {
                        s = x.mul_add(bt[(kk, j)], s);
                    }
                    raw[i * n + j] = s;
                }
            }
        }
    }
    let mut out = Matrix::from_vec(m, n, raw)?;
    for i in 0..m {
        let sa = a.row_scale(i);
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let sb = b_uniform.unwrap_or_else(|| b.row_scale(j));
            *v *= sa * sb;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{rmse, sample_normal_matrix, sample_outlier_matrix, Stream};
    use proptest::prelude::*;

    const E4M3: FloatFormat = FloatFormat::Fp8E4M3;

    #[test]
    fn zero_matrix_has_unit_scale() {
        let q = quantize_per_tensor(&Matrix::zeros(3, 4), E4M3).unwrap();
        assert_eq!(q.scales(), &Scales::PerTensor(1.0));
        assert!(q.codes().as_slice().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn amax_896_gives_scale_two() {
        let m = Matrix::from_rows(&[[1.0, -896.0], [3.0, 0.5]]).unwrap();
        let q = quantize_per_tensor(&m, E4M3).unwrap();
        assert_eq!(q.scales(), &Scales::PerTensor(2.0));
        assert_eq!(q.codes()[(0, 1)], -448.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = Matrix::zeros(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            quantize_per_tensor(&m, E4M3),
            Err(Error::NonFinite { row: 1, col: 0, .. })
        ));
        assert!(quantize_per_block(&Matrix::zeros(2, 2), 0, E4M3).is_err());
        assert_eq!(
            quantize_per_tensor(&Matrix::zeros(0, 3), E4M3),
            Err(Error::Empty("quantize"))
        );
    }

    #[test]
    fn single_block_equals_per_tensor() {
        let m = sample_outlier_matrix(64, 32, 3, Stream::Query);
        let t = quantize_per_tensor(&m, E4M3).unwrap();
        let b = quantize_per_block(&m, 64, E4M3).unwrap();
        assert_eq!(t.codes(), b.codes());
        assert_eq!(t.row_scale(0), b.row_scale(63));
        assert_eq!(dequantize(&t), dequantize(&b));
    }

    #[test]
    fn outlier_block_does_not_touch_other_scales() {
        let clean = sample_normal_matrix(256, 64, 5, Stream::Key);
        let mut dirty = clean.clone();
        dirty[(200, 7)] = 100.0 * clean.amax();
        let a = quantize_per_block(&clean, 128, E4M3).unwrap();
        let b = quantize_per_block(&dirty, 128, E4M3).unwrap();
        assert_eq!(a.row_scale(0), b.row_scale(0));
        assert_ne!(a.row_scale(255), b.row_scale(255));
        for i in 0..128 {
            assert_eq!(a.codes().row(i), b.codes().row(i));
        }
    }

    #[test]
    fn confined_outlier_favours_block_scales() {
        // Outlier 1e4× the bulk: per-tensor pushes the clean rows into the
        // subnormal range, per-block keeps them in the normal range.
        let mut m = sample_normal_matrix(256, 64, 11, Stream::Value);
        m[(130, 3)] = 1e4 * m.amax();
        let t = quantize_per_tensor(&m, E4M3).unwrap();
        let b = quantize_per_block(&m, 128, E4M3).unwrap();
        let et = rmse(&dequantize(&t), &m).unwrap();
        let eb = rmse(&dequantize(&b), &m).unwrap();
        assert!(eb < et, "block {eb} vs tensor {et}");

        // A 100× row keeps the clean rows normal under either scaling, and
        // e4m3 error is relative, so the two end up within rounding noise.
        let mut m = sample_normal_matrix(128, 128, 12, Stream::Value);
        m.row_mut(17).iter_mut().for_each(|x| *x *= 100.0);
        let t = quantize_per_tensor(&m, E4M3).unwrap();
        let b = quantize_per_block(&m, 16, E4M3).unwrap();
        let et = rmse(&dequantize(&t), &m).unwrap();
        let eb = rmse(&dequantize(&b), &m).unwrap();
        assert!((eb - et).abs() <= 0.02 * et, "block {eb} vs tensor {et}");
    }

    #[test]
    fn block_scaling_wins_on_outlier_distribution() {
        let trials = 20;
        let mut wins = 0;
        for seed in 0..trials {
            let m = sample_outlier_matrix(8192, 128, seed, Stream::Query);
            let t = quantize_per_tensor(&m, E4M3).unwrap();
            let b = quantize_per_block(&m, 128, E4M3).unwrap();
            let et = rmse(&dequantize(&t), &m).unwrap();
            let eb = rmse(&dequantize(&b), &m).unwrap();
            if eb <= et {
                wins += 1;
            }
        }
        assert!(wins * 100 >= 95 * trials, "{wins}/{trials}");
    }

    #[test]
    fn new_validates_parts() {
        let codes = Matrix::from_rows(&[[1.0, 2.0], [0.5, -448.0]]).unwrap();
        assert!(QuantizedTensor::new(codes.clone(), E4M3, Scales::PerTensor(0.5)).is_ok());
        assert!(QuantizedTensor::new(codes.clone(), E4M3, Scales::PerTensor(0.0)).is_err());
        let bad = Matrix::from_rows(&[[1.1]]).unwrap();
        assert!(QuantizedTensor::new(bad, E4M3, Scales::PerTensor(1.0)).is_err());
        let short = Scales::PerRowBlock {
            block_rows: 1,
            scales: vec![1.0],
        };
        assert!(QuantizedTensor::new(codes, E4M3, short).is_err());
    }

    #[test]
    fn small_integers_multiply_exactly() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]).unwrap();
        let qa = cast(&a, FloatFormat::Fp16).unwrap();
        let qb = cast(&b, FloatFormat::Fp16).unwrap();
        let c = emulated_matmul(&qa, &qb, false, FloatFormat::Fp32).unwrap();
        assert_eq!(
            c,
            Matrix::from_rows(&[[58.0, 64.0], [139.0, 154.0]]).unwrap()
        );
    }

    #[test]
    fn ones_dot_product() {
        let ones = cast(&Matrix::filled(1, 8, 1.0), E4M3).unwrap();
        for acc in [FloatFormat::Fp32, FloatFormat::Fp64] {
            let c = emulated_matmul(&ones, &ones, true, acc).unwrap();
            assert_eq!(c[(0, 0)], 8.0);
        }
    }

    #[test]
    fn shape_and_format_errors() {
        let a = cast(&Matrix::zeros(2, 3), E4M3).unwrap();
        let b = cast(&Matrix::zeros(2, 4), E4M3).unwrap();
        assert!(matches!(
            emulated_matmul(&a, &b, true, FloatFormat::Fp32),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            emulated_matmul(&a, &a, true, FloatFormat::Fp16),
            Err(Error::UnsupportedFormat { .. })
        ));
        let m = sample_normal_matrix(4, 2, 1, Stream::Key);
        let blocked = quantize_per_block(&m, 2, E4M3).unwrap();
        let lhs = cast(&Matrix::zeros(1, 4), E4M3).unwrap();
        assert!(emulated_matmul(&lhs, &blocked, false, FloatFormat::Fp32).is_err());
    }

    /// Per-element oracle: one f32 fused multiply-add per step.
    fn scalar_oracle(a: &QuantizedTensor, b: &QuantizedTensor) -> Matrix {
        Matrix::from_fn(a.rows(), b.rows(), |i, j| {
            let mut s = 0.0f32;
            for k in 0..a.cols() {
                s = (a.codes()[(i, k)] as f32).mul_add(b.codes()[(j, k)] as f32, s);
            }
            s as f64 * (a.row_scale(i) * b.row_scale(j))
        })
    }

    #[test]
    fn e4m3_matmul_matches_scalar_oracle() {
        let q = sample_outlier_matrix(67, 128, 1, Stream::Query);
        let k = sample_outlier_matrix(45, 128, 1, Stream::Key);
        let qa = quantize_per_block(&q, 16, E4M3).unwrap();
        let kb = quantize_per_block(&k, 32, E4M3).unwrap();
        let got = emulated_matmul(&qa, &kb, true, FloatFormat::Fp32).unwrap();
        assert_eq!(got, scalar_oracle(&qa, &kb));

        // Same through the non-transposed path.
        let kt = quantize_per_tensor(&k.transpose(), E4M3).unwrap();
        let kn = quantize_per_tensor(&k, E4M3).unwrap();
        let lhs = quantize_per_tensor(&q, E4M3).unwrap();
        assert_eq!(
            emulated_matmul(&lhs, &kt, false, FloatFormat::Fp32).unwrap(),
            scalar_oracle(&lhs, &kn)
        );
    }

    #[test]
    fn fp32_operands_use_fused_steps() {
        let a = cast(
            &sample_normal_matrix(9, 40, 2, Stream::Query),
            FloatFormat::Fp32,
        )
        .unwrap();
        let b = cast(
            &sample_normal_matrix(7, 40, 2, Stream::Key),
            FloatFormat::Fp32,
        )
        .unwrap();
        let got = emulated_matmul(&a, &b, true, FloatFormat::Fp32).unwrap();
        assert_eq!(got, scalar_oracle(&a, &b));
    }

    proptest! {
        #[test]
        fn round_trip_within_one_ulp_at_scale(
            data in proptest::collection::vec(-1e3f64..1e3, 24),
            block in 1usize..7,
        ) {
            let m = Matrix::from_vec(6, 4, data).unwrap();
            for f in [E4M3, FloatFormat::Fp16, FloatFormat::Bf16] {
                for q in [quantize_per_tensor(&m, f).unwrap(), quantize_per_block(&m, block, f).unwrap()] {
                    let back = dequantize(&q);
                    for i in 0..6 {
                        let s = q.row_scale(i);
                        for j in 0..4 {
                            let c = q.codes()[(i, j)];
                            prop_assert!(c.abs() <= f.max_finite());
                            let x = m[(i, j)];
                            prop_assert!((back[(i, j)] - x).abs() <= f.ulp(x / s) * s * (1.0 + 1e-12));
                        }
                    }
                }
            }
        }
    }
}
