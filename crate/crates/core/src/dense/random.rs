//! Seeded sampling.
//!
//! All randomness comes from the ChaCha8 keystream (a counter-based
//! generator): the 256-bit key is the little-endian `u64` seed followed by
//! zero bytes, and each logical input gets its own ChaCha stream id (see
//! [`Stream`]). Uniforms are `(next_u64 >> 11) · 2⁻⁵³`; standard normals use
//! the Box–Muller transform on pairs of uniforms, returning the cosine branch
//! first and the sine branch on the next call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::matrix::Matrix;

/// ChaCha stream ids, one per logical tensor so that e.g. `Q` and `K` drawn
/// from the same seed are independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Query,
    Key,
    Value,
    OutputGrad,
    Signs,
    Custom(u64),
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Query => 0,
            Stream::Key => 1,
            Stream::Value => 2,
            Stream::OutputGrad => 3,
            Stream::Signs => 4,
            Stream::Custom(n) => 16 + n,
        }
    }
}

pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream.id());
        SeededRng {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Matrix of i.i.d. standard normals.
pub fn sample_normal_matrix(rows: usize, cols: usize, seed: u64, stream: Stream) -> Matrix {
    let mut rng = SeededRng::new(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Probability that an entry carries an outlier term.
pub const OUTLIER_PROBABILITY: f64 = 0.001;
/// Standard deviation of the outlier term.
pub const OUTLIER_STD: f64 = 10.0;

/// Entries drawn i.i.d. from `N(0,1) + N(0,100)·Bernoulli(0.001)`.
///
/// Per entry the generator draws the base normal, then a uniform; only when
/// the uniform falls below 0.001 is a second normal drawn for the outlier.
pub fn sample_outlier_matrix(rows: usize, cols: usize, seed: u64, stream: Stream) -> Matrix {
    let mut rng = SeededRng::new(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| {
        let base = rng.normal();
        if rng.uniform() < OUTLIER_PROBABILITY {
            base + OUTLIER_STD * rng.normal()
        } else {
            base
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = sample_outlier_matrix(32, 16, 9, Stream::Query);
        let b = sample_outlier_matrix(32, 16, 9, Stream::Query);
        assert_eq!(a, b);
        assert_ne!(a, sample_outlier_matrix(32, 16, 9, Stream::Key));
        assert_ne!(a, sample_outlier_matrix(32, 16, 10, Stream::Query));
    }

    #[test]
    fn standard_normal_moments() {
        let m = sample_normal_matrix(1000, 200, 1, Stream::Custom(0));
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn outlier_mixture_statistics() {
        // 10^6 samples; the mixture has variance 1 + 0.001·100 = 1.1.
        let m = sample_outlier_matrix(1000, 1000, 2024, Stream::Query);
        let xs = m.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((1.0..=1.15).contains(&std), "std {std}");
        // P(|x| > 8) ≈ 0.001 · P(|N(0, 101)| > 8) ≈ 0.001 · 0.426.
        let tail = xs.iter().filter(|x| x.abs() > 8.0).count() as f64 / n;
        assert!((3.0e-4..=5.5e-4).contains(&tail), "tail fraction {tail}");
    }
}
