use crate::dense::Matrix;
use crate::error::{invalid, Result};

/// Lane order inside each group of 8 columns: `d0 d1 d4 d5 d2 d3 d6 d7`.
const GROUP: [usize; 8] = [0, 1, 4, 5, 2, 3, 6, 7];

/// Column order of the fp32 accumulator as the second GEMM's operand sees
/// it, repeated over every 8 columns of a width divisible by 16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutPermutation {
    /// `source[c]` is the column that lands at position `c`.
    source: Vec<usize>,
}

impl LayoutPermutation {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 || width % 16 != 0 {
            return Err(invalid(
                "width",
                format!("{width} is not a positive multiple of 16"),
            ));
        }
        let source = (0..width).map(|c| c - c % 8 + GROUP[c % 8]).collect();
        Ok(LayoutPermutation { source })
    }

    pub fn width(&self) -> usize {
        self.source.len()
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn inverse(&self) -> LayoutPermutation {
        let mut source = vec![0; self.width()];
        for (c, &s) in self.source.iter().enumerate() {
            source[s] = c;
        }
        LayoutPermutation { source }
    }

    /// `out[:, c] = m[:, source[c]]`.
    pub fn apply_columns(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m.cols())?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            m[(r, self.source[c])]
        }))
    }

    /// `out[r, :] = m[source[r], :]`, the matching reorder of a right operand.
    pub fn apply_rows(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m.rows())?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            m[(self.source[r], c)]
        }))
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.width() {
            return Err(crate::error::mismatch(
                "LayoutPermutation",
                format!("length {len}, permutation width {}", self.width()),
            ));
        }
        Ok(())
    }
}

/// Reorders accumulator columns into the operand layout.
pub fn permute_accumulator(block: &Matrix) -> Result<Matrix> {
    LayoutPermutation::new(block.cols())?.apply_columns(block)
}

/// `B_c × d` → `d × B_c`.
pub fn vtile_transpose(v_block: &Matrix) -> Matrix {
    v_block.transpose()
}

/// Transpose that also writes V's rows in the permuted order, so that
/// `permute_accumulator(P̃) · vtile_transpose_permuted(V)ᵀ = P̃·V`.
pub fn vtile_transpose_permuted(v_block: &Matrix) -> Result<Matrix> {
    Ok(LayoutPermutation::new(v_block.rows())?
        .apply_rows(v_block)?
        .transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{matmul, sample_normal_matrix, Stream};

    #[test]
    fn width_16_pattern() {
        let p = permute_accumulator(&Matrix::identity(16)).unwrap();
        let order: Vec<usize> = (0..16)
            .map(|c| (0..16).find(|&r| p[(r, c)] == 1.0).unwrap())
            .collect();
        assert_eq!(
            order,
            vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
    }

    #[test]
    fn bijective_and_invertible() {
        for w in [16, 32, 128] {
            let p = LayoutPermutation::new(w).unwrap();
            let mut seen = p.source().to_vec();
            seen.sort();
            assert_eq!(seen, (0..w).collect::<Vec<_>>());
            let m = sample_normal_matrix(3, w, w as u64, Stream::Custom(3));
            let back = p
                .inverse()
                .apply_columns(&p.apply_columns(&m).unwrap())
                .unwrap();
            assert_eq!(back, m);
            // The pattern swaps lanes 2↔4 and 3↔5, so it is its own inverse.
            assert_eq!(p.inverse(), p);
        }
        assert!(LayoutPermutation::new(24).is_err());
        assert!(permute_accumulator(&Matrix::zeros(2, 8)).is_err());
    }

    #[test]
    fn transpose_literals() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let t = vtile_transpose(&m);
        assert_eq!(
            t,
            Matrix::from_rows(&[[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]]).unwrap()
        );
        assert_eq!(vtile_transpose(&t), m);
    }

    #[test]
    fn permuted_product_is_unchanged() {
        let p = sample_normal_matrix(8, 32, 1, Stream::Custom(5));
        let v = sample_normal_matrix(32, 16, 1, Stream::Custom(6));
        let direct = matmul(&p, &v, false).unwrap();
        let vt = vtile_transpose_permuted(&v).unwrap();
        let permuted = matmul(&permute_accumulator(&p).unwrap(), &vt, true).unwrap();
        assert!(permuted.max_abs_diff(&direct) <= 1e-14);

        // Integer entries: every partial sum is exact, so the match is exact.
        let p = p.map(|x| (4.0 * x).round());
        let v = v.map(|x| (4.0 * x).round());
        let direct = matmul(&p, &v, false).unwrap();
        let permuted = matmul(
            &permute_accumulator(&p).unwrap(),
            &vtile_transpose_permuted(&v).unwrap(),
            true,
        )
        .unwrap();
        assert_eq!(permuted, direct);
    }
}
