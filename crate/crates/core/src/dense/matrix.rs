use std::fmt;
use std::ops::{Index, IndexMut};

use super::kernels;
use crate::error::{invalid, mismatch, Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Entries are finite except where an operation explicitly produces `-inf`
/// for masked attention logits.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(
                "data",
                format!(
                    "expected {} entries for {rows}x{cols}, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row literals; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid(
                    "rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Copy of rows `start..end`.
    pub fn rows_range(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn amax(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Largest entrywise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<Error> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|p| Error::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
                value: self.data[p],
            })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
            write!(f, "{rows:?}")
        } else {
            write!(f, "[..]")
        }
    }
}

/// `a · b` or `a · bᵀ` in exact FP64 with ascending-k accumulation per entry.
///
/// Every output entry is `((0 + a₀b₀) + a₁b₁) + …`, so the result is
/// bit-identical to a scalar triple loop.
pub fn matmul(a: &Matrix, b: &Matrix, transpose_b: bool) -> Result<Matrix> {
    let (k_b, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != k_b {
        return Err(mismatch(
            "matmul",
            format!(
                "lhs is {}x{}, rhs{} is {}x{}",
                a.rows,
                a.cols,
                if transpose_b { "ᵀ" } else { "" },
                k_b,
                n
            ),
        ));
    }
    let bt;
    let rhs = if transpose_b {
        bt = b.transpose();
        &bt
    } else {
        b
    };
    let mut c = Matrix::zeros(a.rows, n);
    kernels::gemm_acc(
        a.rows,
        n,
        a.cols,
        &a.data,
        a.cols,
        &rhs.data,
        n,
        &mut c.data,
        n,
    );
    Ok(c)
}

/// Per-row maximum. Rows that are entirely `-inf` yield `-inf`.
pub fn row_max(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Empty("row_max"));
    }
    Ok((0..a.rows)
        .map(|i| a.row(i).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
        .collect())
}

/// Per-row sum, accumulated left to right.
pub fn row_sum(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Empty("row_sum"));
    }
    Ok((0..a.rows)
        .map(|i| a.row(i).iter().fold(0.0, |s, &x| s + x))
        .collect())
}

/// Root mean squared entrywise difference.
pub fn rmse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "rmse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::Empty("rmse"));
    }
    let sum_sq = a
        .data
        .iter()
        .zip(&b.data)
        .fold(0.0, |s, (x, y)| s + (x - y) * (x - y));
    Ok((sum_sq / a.data.len() as f64).sqrt())
}
