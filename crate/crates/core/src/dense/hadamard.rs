use super::matrix::Matrix;
use super::random::{SeededRng, Stream};
use crate::error::{Error, Result};

/// Normalized fast Walsh–Hadamard transform in place: `v ← H·v / √d`.
pub fn fwht_in_place(v: &mut [f64]) -> Result<()> {
    let d = v.len();
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(d));
    }
    let mut h = 1;
    while h < d {
        for start in (0..d).step_by(2 * h) {
            for i in start..start + h {
                let (x, y) = (v[i], v[i + h]);
                v[i] = x + y;
                v[i + h] = x - y;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (d as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= norm);
    Ok(())
}

/// Normalized fast Walsh–Hadamard transform of `v`.
pub fn fwht(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Random orthogonal map `M = diag(signs) · H / √d`.
///
/// Row vectors are transformed as `x ↦ x·M`, i.e. flip signs then apply the
/// normalized Hadamard transform, in `O(d log d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DHTransform {
    signs: Vec<f64>,
}

impl DHTransform {
    pub fn new(signs: Vec<f64>) -> Result<Self> {
        if signs.is_empty() || !signs.len().is_power_of_two() {
            return Err(Error::NotPowerOfTwo(signs.len()));
        }
        if let Some(p) = signs.iter().position(|s| s.abs() != 1.0) {
            return Err(crate::error::invalid(
                "signs",
                format!("entry {p} is {}, expected ±1", signs[p]),
            ));
        }
        Ok(DHTransform { signs })
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn normalization(&self) -> f64 {
        1.0 / (self.dim() as f64).sqrt()
    }

    /// `x ← x·M`.
    pub fn apply_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check_len(x.len())?;
        x.iter_mut().zip(&self.signs).for_each(|(v, s)| *v *= s);
        fwht_in_place(x)
    }

    /// `x ← x·Mᵀ`, the inverse of [`apply_in_place`](Self::apply_in_place).
    pub fn apply_inverse_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check_len(x.len())?;
        fwht_in_place(x)?;
        x.iter_mut().zip(&self.signs).for_each(|(v, s)| *v *= s);
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.apply_inverse_in_place(&mut out)?;
        Ok(out)
    }

    /// Transforms every row: returns `X·M`.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        self.check_len(x.cols())?;
        let mut out = x.clone();
        for i in 0..out.rows() {
            self.apply_in_place(out.row_mut(i))?;
        }
        Ok(out)
    }

    /// The dense matrix `M` this transform applies.
    pub fn dense(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            // row i of M is e_i · M
            self.apply_in_place(&mut e).expect("dimension checked");
            m.row_mut(i).copy_from_slice(&e);
        }
        m
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(crate::error::mismatch(
                "DHTransform",
                format!("vector length {len}, transform dimension {}", self.dim()),
            ));
        }
        Ok(())
    }
}

/// Draws the sign vector uniformly from `{−1, +1}^dim` on the `Signs` stream of `seed`.
pub fn random_dh_transform(dim: usize, seed: u64) -> Result<DHTransform> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(dim));
    }
    let mut rng = SeededRng::new(seed, Stream::Signs);
    let signs = (0..dim)
        .map(|_| if rng.next_u64() >> 63 == 0 { 1.0 } else { -1.0 })
        .collect();
    DHTransform::new(signs)
}
