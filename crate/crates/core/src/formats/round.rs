use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};

/// A binary floating-point format with IEEE-style subnormals.
///
/// `Fp8E4M3` follows the OCP "fn" variant: no infinities, a single NaN
/// pattern and a largest finite magnitude of 448.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatFormat {
    Fp64,
    Fp32,
    Fp16,
    Bf16,
    #[serde(rename = "fp8e4m3")]
    Fp8E4M3,
}

/// What happens to values beyond the largest finite magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Overflow {
    /// Clamp to ±max-finite.
    #[default]
    Saturate,
    /// ±inf, or NaN for formats without infinities (e4m3).
    NonFinite,
}

impl FloatFormat {
    pub const ALL: [FloatFormat; 5] = [
        FloatFormat::Fp64,
        FloatFormat::Fp32,
        FloatFormat::Fp16,
        FloatFormat::Bf16,
        FloatFormat::Fp8E4M3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FloatFormat::Fp64 => "fp64",
            FloatFormat::Fp32 => "fp32",
            FloatFormat::Fp16 => "fp16",
            FloatFormat::Bf16 => "bf16",
            FloatFormat::Fp8E4M3 => "fp8e4m3",
        }
    }

    /// Stored (explicit) mantissa bits.
    pub fn mantissa_bits(self) -> u32 {
        match self {
            FloatFormat::Fp64 => 52,
            FloatFormat::Fp32 => 23,
            FloatFormat::Fp16 => 10,
            FloatFormat::Bf16 => 7,
            FloatFormat::Fp8E4M3 => 3,
        }
    }

    pub fn exponent_bits(self) -> u32 {
        match self {
            FloatFormat::Fp64 => 11,
            FloatFormat::Fp32 | FloatFormat::Bf16 => 8,
            FloatFormat::Fp16 => 5,
            FloatFormat::Fp8E4M3 => 4,
        }
    }

    /// Significand precision including the implicit bit.
    pub fn precision(self) -> u32 {
        self.mantissa_bits() + 1
    }

    /// Exponent of the smallest normal number.
    pub fn min_normal_exponent(self) -> i32 {
        match self {
            FloatFormat::Fp64 => -1022,
            FloatFormat::Fp32 | FloatFormat::Bf16 => -126,
            FloatFormat::Fp16 => -14,
            FloatFormat::Fp8E4M3 => -6,
        }
    }

    pub fn max_finite(self) -> f64 {
        match self {
            FloatFormat::Fp64 => f64::MAX,
            FloatFormat::Fp32 => f32::MAX as f64,
            FloatFormat::Fp16 => 65504.0,
            FloatFormat::Bf16 => (2.0 - pow2(-7)) * pow2(127),
            FloatFormat::Fp8E4M3 => 448.0,
        }
    }

    pub fn has_infinity(self) -> bool {
        self != FloatFormat::Fp8E4M3
    }

    /// Spacing of representable values around `x` (the subnormal spacing
    /// below the normal range).
    pub fn ulp(self, x: f64) -> f64 {
        let e = exponent_of(x.abs()).max(self.min_normal_exponent());
        pow2(e - self.mantissa_bits() as i32)
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "fp64" | "f64" => Ok(FloatFormat::Fp64),
            "fp32" | "f32" => Ok(FloatFormat::Fp32),
            "fp16" | "f16" => Ok(FloatFormat::Fp16),
            "bf16" => Ok(FloatFormat::Bf16),
            "fp8" | "e4m3" | "fp8e4m3" | "fp8-e4m3" => Ok(FloatFormat::Fp8E4M3),
            other => Err(invalid("format", format!("unknown format `{other}`"))),
        }
    }
}

/// Exact power of two for exponents in the f64 normal range.
#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// `floor(log2(a))` for positive normal `a`; f64 subnormals report -1023.
#[inline]
fn exponent_of(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Round-to-nearest-even into `f`, saturating on overflow. NaN propagates.
#[inline]
pub fn round_to(x: f64, f: FloatFormat) -> f64 {
    round_to_with(x, f, Overflow::Saturate)
}

/// Round-to-nearest-even into `f` with an explicit overflow policy.
pub fn round_to_with(x: f64, f: FloatFormat, overflow: Overflow) -> f64 {
    if f == FloatFormat::Fp64 || x.is_nan() || x == 0.0 {
        return x;
    }
    let a = x.abs();
    let rounded = if a.is_infinite() {
        f64::INFINITY
    } else {
        let e = exponent_of(a);
        if e < -1022 {
            // f64 subnormal: far below every emulated format's subnormal range.
            0.0
        } else {
            let qe = e.max(f.min_normal_exponent()) - f.mantissa_bits() as i32;
            // a / 2^qe is exact, so ties are seen exactly.
            (a * pow2(-qe)).round_ties_even() * pow2(qe)
        }
    };
    let max = f.max_finite();
    let mag = if rounded > max {
        match overflow {
            Overflow::Saturate => max,
            Overflow::NonFinite if f.has_infinity() => f64::INFINITY,
            Overflow::NonFinite => return f64::NAN,
        }
    } else {
        rounded
    };
    mag.copysign(x)
}
