use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::dense::{random_dh_transform, Matrix};
use crate::error::{Error, Result};
use crate::flash::lowprec::{tiled_forward_lowp, LowPrecOperands, PTildeFormat};
use crate::flash::{ForwardOutput, TileConfig};
use crate::formats::{quantize_per_block, quantize_per_tensor, FloatFormat};
use crate::reference::AttentionInputs;

const E4M3: FloatFormat = FloatFormat::Fp8E4M3;

/// Scale granularity for Q, K and V.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantization {
    PerTensor,
    /// Q per `B_r` rows, K and V per `B_c` rows.
    PerBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fp8AttentionConfig {
    pub quantization: Quantization,
    pub incoherent: bool,
    /// Seed of the random sign vector of the incoherent transform.
    pub seed: u64,
    pub tile: TileConfig,
}

impl Fp8AttentionConfig {
    /// Block quantization with incoherent processing.
    pub fn full(seed: u64) -> Self {
        Fp8AttentionConfig {
            quantization: Quantization::PerBlock,
            incoherent: true,
            seed,
            tile: TileConfig::default(),
        }
    }

    pub fn with_quantization(mut self, q: Quantization) -> Self {
        self.quantization = q;
        self
    }

    pub fn with_incoherent(mut self, on: bool) -> Self {
        self.incoherent = on;
        self
    }

    pub fn with_tile(mut self, tile: TileConfig) -> Self {
        self.tile = tile;
        self
    }
}

/// Multiplies every row of Q and K by the same random orthogonal
/// `M = diag(signs)·H/√d`, leaving `QKᵀ` unchanged.
pub fn preprocess_incoherent(q: &Matrix, k: &Matrix, seed: u64) -> Result<(Matrix, Matrix)> {
    let t = random_dh_transform(q.cols(), seed)?;
    Ok((t.apply_rows(q)?, t.apply_rows(k)?))
}

/// FP8 tiled forward.
///
/// Scores come from an fp32-accumulated product of e4m3 codes, descaled by
/// the Q-block and K-block scales (and α) before the online softmax. `P̃` is
/// requantized to e4m3 per `(i, j)` tile with scale `amax/448` (fixed
/// `1/448` under per-tensor quantization), and the V-block scale is applied
/// as each PV product enters the fp32 accumulator. The output is not rounded.
pub fn fp8_flash_fwd(inputs: &AttentionInputs, cfg: &Fp8AttentionConfig) -> Result<ForwardOutput> {
    inputs.validate()?;
    cfg.tile.validate()?;
    let d = inputs.head_dim();
    let (q, k): (Cow<Matrix>, Cow<Matrix>) = if cfg.incoherent {
        if !d.is_power_of_two() {
            return Err(Error::UnsupportedFormat {
                op: "incoherent processing",
                format: format!("head dimension {d} (needs a power of two)"),
            });
        }
        let (q, k) = preprocess_incoherent(inputs.q, inputs.k, cfg.seed)?;
        (Cow::Owned(q), Cow::Owned(k))
    } else {
        (Cow::Borrowed(inputs.q), Cow::Borrowed(inputs.k))
    };
    let (qq, kq, vq, p_format) = match cfg.quantization {
        Quantization::PerTensor => (
            quantize_per_tensor(&q, E4M3)?,
            quantize_per_tensor(&k, E4M3)?,
            quantize_per_tensor(inputs.v, E4M3)?,
            PTildeFormat::E4m3Fixed,
        ),
        Quantization::PerBlock => (
            quantize_per_block(&q, cfg.tile.block_rows, E4M3)?,
            quantize_per_block(&k, cfg.tile.block_cols, E4M3)?,
            quantize_per_block(inputs.v, cfg.tile.block_cols, E4M3)?,
            PTildeFormat::E4m3PerTile,
        ),
    };
    let ops = LowPrecOperands::new(&qq, &kq, &vq, &cfg.tile)?;
    let transformed = AttentionInputs {
        q: &q,
        k: &k,
        ..*inputs
    };
    tiled_forward_lowp(&transformed, &ops, &cfg.tile, p_format, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{rmse, sample_normal_matrix, sample_outlier_matrix, Stream};
    use crate::flash::flash_fwd_basic;
    use crate::reference::{baseline_lowprec_attention, std_attention_output};

    #[test]
    fn incoherent_transform_keeps_scores() {
        let q = sample_outlier_matrix(64, 64, 1, Stream::Query);
        let k = sample_outlier_matrix(80, 64, 1, Stream::Key);
        let (q2, k2) = preprocess_incoherent(&q, &k, 7).unwrap();
        let s = crate::dense::matmul(&q, &k, true).unwrap();
        let s2 = crate::dense::matmul(&q2, &k2, true).unwrap();
        assert!(s.max_abs_diff(&s2) <= 1e-10);
        assert_eq!(preprocess_incoherent(&q, &k, 7).unwrap(), (q2, k2));
        let bad = Matrix::zeros(4, 12);
        assert_eq!(
            preprocess_incoherent(&bad, &bad, 0),
            Err(Error::NotPowerOfTwo(12))
        );
    }

    #[test]
    fn incoherent_transform_spreads_outliers() {
        let mut ratios: Vec<f64> = (0..100)
            .map(|seed| {
                let q = sample_outlier_matrix(128, 128, seed, Stream::Query);
                let (q2, _) = preprocess_incoherent(&q, &q, 1000 + seed).unwrap();
                q2.amax() / q.amax()
            })
            .collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ratios[50] < 1.0, "median amax ratio {}", ratios[50]);
    }

    #[test]
    fn incoherent_transform_is_exact_without_quantization() {
        let q = sample_normal_matrix(96, 32, 2, Stream::Query);
        let k = sample_normal_matrix(96, 32, 2, Stream::Key);
        let v = sample_normal_matrix(96, 32, 2, Stream::Value);
        let (q2, k2) = preprocess_incoherent(&q, &k, 3).unwrap();
        let cfg = TileConfig::new(32, 32).unwrap();
        let a = flash_fwd_basic(&AttentionInputs::new(&q, &k, &v).unwrap(), &cfg).unwrap();
        let b = flash_fwd_basic(&AttentionInputs::new(&q2, &k2, &v).unwrap(), &cfg).unwrap();
        assert!(a.o.max_abs_diff(&b.o) <= 1e-12);
    }

    /// Entries in `{0, ±a/2, ±a}` with `a` present in every `block` rows,
    /// so each block quantizes to e4m3 without loss.
    fn exact(rows: usize, cols: usize, seed: u64, stream: Stream, a: f64, block: usize) -> Matrix {
        let mut m = sample_normal_matrix(rows, cols, seed, stream)
            .map(|x| (x.clamp(-1.0, 1.0) * 2.0).round() * a / 2.0);
        for r in (0..rows).step_by(block) {
            m[(r, 0)] = a;
        }
        m
    }

    #[test]
    fn lossless_inputs_match_fp64() {
        let q = exact(64, 16, 1, Stream::Query, 1.0 / 128.0, 16);
        let k = exact(64, 16, 1, Stream::Key, 1.0 / 128.0, 16);
        let v = exact(64, 16, 1, Stream::Value, 1.0, 16);
        let tile = TileConfig::new(16, 16).unwrap();
        for causal in [false, true] {
            let inputs = AttentionInputs::new(&q, &k, &v)
                .unwrap()
                .with_causal(causal);
            let exact = flash_fwd_basic(&inputs, &tile).unwrap();
            for quant in [Quantization::PerBlock, Quantization::PerTensor] {
                let cfg = Fp8AttentionConfig::full(0)
                    .with_tile(tile)
                    .with_incoherent(false)
                    .with_quantization(quant);
                let out = fp8_flash_fwd(&inputs, &cfg).unwrap();
                assert!(
                    out.o.max_abs_diff(&exact.o) <= 5e-3,
                    "{quant:?} causal={causal}"
                );
            }
        }
    }

    #[test]
    fn ablations_on_outliers() {
        let q = sample_outlier_matrix(256, 128, 5, Stream::Query);
        let k = sample_outlier_matrix(1024, 128, 5, Stream::Key);
        let v = sample_outlier_matrix(1024, 128, 5, Stream::Value);
        let inputs = AttentionInputs::new(&q, &k, &v).unwrap();
        let (exact, _) = std_attention_output(&inputs).unwrap();
        let err = |cfg: Fp8AttentionConfig| {
            rmse(&fp8_flash_fwd(&inputs, &cfg).unwrap().o, &exact).unwrap()
        };
        let full = err(Fp8AttentionConfig::full(9));
        let no_inc = err(Fp8AttentionConfig::full(9).with_incoherent(false));
        let base = rmse(
            &baseline_lowprec_attention(&inputs, FloatFormat::Fp8E4M3).unwrap(),
            &exact,
        )
        .unwrap();
        assert!(full < no_inc, "full {full} no-incoherent {no_inc}");
        assert!(full * 1.67 <= base, "full {full} baseline {base}");
    }

    #[test]
    fn rejects_odd_head_dim_with_incoherence() {
        let m = sample_normal_matrix(8, 12, 1, Stream::Query);
        let inputs = AttentionInputs::new(&m, &m, &m).unwrap();
        let cfg = Fp8AttentionConfig::full(0).with_tile(TileConfig::new(4, 4).unwrap());
        assert!(matches!(
            fp8_flash_fwd(&inputs, &cfg),
            Err(Error::UnsupportedFormat { .. })
        ));
        assert!(fp8_flash_fwd(&inputs, &cfg.with_incoherent(false)).is_ok());
    }
}
