//! RMSE of low-precision attention variants against an FP64 reference on
//! the outlier distribution.

use serde::{Deserialize, Serialize};

use crate::dense::{rmse, sample_outlier_matrix, Matrix, Stream};
use crate::error::{invalid, Result};
use crate::flash::{flash_fwd_fp16, TileConfig};
use crate::formats::FloatFormat;
use crate::fp8::{fp8_flash_fwd, Fp8AttentionConfig, Quantization};
use crate::reference::{baseline_lowprec_attention, std_attention_output, AttentionInputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fp16Baseline,
    Fp16Flash,
    Fp8Baseline,
    Fp8Full,
    Fp8NoBlockQuant,
    Fp8NoIncoherent,
    /// Neither block quantization nor incoherent processing.
    Fp8PerTensorNoIncoherent,
}

impl Variant {
    /// The six rows of the accuracy table.
    pub const ALL: [Variant; 6] = [
        Variant::Fp16Baseline,
        Variant::Fp16Flash,
        Variant::Fp8Baseline,
        Variant::Fp8Full,
        Variant::Fp8NoBlockQuant,
        Variant::Fp8NoIncoherent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fp16Baseline => "fp16-baseline",
            Variant::Fp16Flash => "fp16-flash",
            Variant::Fp8Baseline => "fp8-baseline",
            Variant::Fp8Full => "fp8-full",
            Variant::Fp8NoBlockQuant => "fp8-no-block-quant",
            Variant::Fp8NoIncoherent => "fp8-no-incoherent",
            Variant::Fp8PerTensorNoIncoherent => "fp8-per-tensor-no-incoherent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseConfig {
    pub seqlen: usize,
    pub headdim: usize,
    pub trials: usize,
    /// Trial `t` samples Q, K, V and the incoherent signs from seed `seed + t`.
    pub seed: u64,
    pub tile: TileConfig,
    pub variants: Vec<Variant>,
}

impl Default for RmseConfig {
    fn default() -> Self {
        RmseConfig {
            seqlen: 8192,
            headdim: 128,
            trials: 10,
            seed: 0,
            tile: TileConfig::default(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseTrial {
    pub trial: usize,
    pub seed: u64,
    /// Root-mean-square of the reference output, for scale.
    pub reference_rms: f64,
    pub errors: Vec<(Variant, f64)>,
}

impl RmseTrial {
    pub fn get(&self, v: Variant) -> Option<f64> {
        self.errors.iter().find(|e| e.0 == v).map(|e| e.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub config: RmseConfig,
    pub trials: Vec<RmseTrial>,
}

impl RmseReport {
    pub fn median(&self, v: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.trials.iter().filter_map(|t| t.get(v)).collect();
        median(&xs)
    }

    /// Trials where `a ≤ b`.
    pub fn count_le(&self, a: Variant, b: Variant) -> usize {
        self.trials
            .iter()
            .filter(|t| matches!((t.get(a), t.get(b)), (Some(x), Some(y)) if x <= y))
            .count()
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// One trial: every requested variant against the FP64 reference.
pub fn run_trial(cfg: &RmseConfig, trial: usize) -> Result<RmseTrial> {
    let seed = cfg.seed + trial as u64;
    let (n, d) = (cfg.seqlen, cfg.headdim);
    let q = sample_outlier_matrix(n, d, seed, Stream::Query);
    let k = sample_outlier_matrix(n, d, seed, Stream::Key);
    let v = sample_outlier_matrix(n, d, seed, Stream::Value);
    let inputs = AttentionInputs::new(&q, &k, &v)?;
    let (exact, _) = std_attention_output(&inputs)?;
    let reference_rms = (exact.as_slice().iter().map(|x| x * x).sum::<f64>()
        / exact.as_slice().len() as f64)
        .sqrt();
    let fp8 = Fp8AttentionConfig::full(seed).with_tile(cfg.tile);
    let mut errors = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let o: Matrix = match variant {
            Variant::Fp16Baseline => baseline_lowprec_attention(&inputs, FloatFormat::Fp16)?,
            Variant::Fp16Flash => flash_fwd_fp16(&inputs, &cfg.tile)?.o,
            Variant::Fp8Baseline => baseline_lowprec_attention(&inputs, FloatFormat::Fp8E4M3)?,
            Variant::Fp8Full => fp8_flash_fwd(&inputs, &fp8)?.o,
            Variant::Fp8NoBlockQuant => {
                fp8_flash_fwd(&inputs, &fp8.with_quantization(Quantization::PerTensor))?.o
            }
            Variant::Fp8NoIncoherent => fp8_flash_fwd(&inputs, &fp8.with_incoherent(false))?.o,
            Variant::Fp8PerTensorNoIncoherent => {
                let plain = fp8
                    .with_quantization(Quantization::PerTensor)
                    .with_incoherent(false);
                fp8_flash_fwd(&inputs, &plain)?.o
            }
        };
        errors.push((variant, rmse(&o, &exact)?));
    }
    Ok(RmseTrial {
        trial,
        seed,
        reference_rms,
        errors,
    })
}

/// All trials in order; `progress` sees each one as it finishes.
pub fn run_rmse(cfg: &RmseConfig, mut progress: impl FnMut(&RmseTrial)) -> Result<RmseReport> {
    if cfg.trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    if cfg.seqlen == 0 || cfg.headdim == 0 {
        return Err(invalid(
            "seqlen",
            "sequence length and head dimension must be positive",
        ));
    }
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let trial = run_trial(cfg, t)?;
        progress(&trial);
        trials.push(trial);
    }
    Ok(RmseReport {
        config: cfg.clone(),
        trials,
    })
}
