use crate::dense::Matrix;
use crate::error::{mismatch, Result};

/// Running row maximum `m` and row sum `ℓ` of the online softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxState {
    pub m: Vec<f64>,
    pub ell: Vec<f64>,
}

impl SoftmaxState {
    /// `m = −∞`, `ℓ = 0` for `rows` rows.
    pub fn new(rows: usize) -> Self {
        SoftmaxState {
            m: vec![f64::NEG_INFINITY; rows],
            ell: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    /// Turns the score block `s` (`rows × cols`, row-major) into `P̃` in
    /// place, writing each row's rescale factor `exp(m_old − m_new)`.
    ///
    /// A row that has seen only masked entries keeps `m = −∞` and gets
    /// rescale 0 and `P̃ = 0`, so `0·O` stays well defined.
    pub(crate) fn step_in_place(&mut self, s: &mut [f64], cols: usize, rescale: &mut [f64]) {
        for (r, row) in s.chunks_exact_mut(cols).enumerate() {
            let m_old = self.m[r];
            let m_new = row.iter().fold(m_old, |a, &b| a.max(b));
            if m_new == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                rescale[r] = 0.0;
                continue;
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m_new).exp();
                sum += *x;
            }
            let factor = (m_old - m_new).exp();
            self.ell[r] = factor * self.ell[r] + sum;
            self.m[r] = m_new;
            rescale[r] = factor;
        }
    }

    /// `L = m + ln ℓ`; rows that never saw an unmasked entry give `−∞`.
    pub fn logsumexp(&self) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.ell)
            .map(|(&m, &l)| {
                if l > 0.0 {
                    m + l.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

/// One online-softmax update: returns `P̃ = exp(S − m')`, the per-row
/// rescale `exp(m − m')` for the output accumulator, and the new state.
pub fn online_softmax_step(
    state: &SoftmaxState,
    s_block: &Matrix,
) -> Result<(Matrix, Vec<f64>, SoftmaxState)> {
    if s_block.rows() != state.rows() {
        return Err(mismatch(
            "online_softmax_step",
            format!(
                "state has {} rows, block has {}",
                state.rows(),
                s_block.rows()
            ),
        ));
    }
    let mut next = state.clone();
    let mut p = s_block.clone();
    let mut rescale = vec![0.0; state.rows()];
    let cols = s_block.cols().max(1);
    next.step_in_place(p.as_mut_slice(), cols, &mut rescale);
    Ok((p, rescale, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{sample_normal_matrix, Stream};

    #[test]
    fn first_step_from_empty_state() {
        let s = Matrix::from_rows(&[[1.0, 2.0, 0.0]]).unwrap();
        let (p, rescale, st) = online_softmax_step(&SoftmaxState::new(1), &s).unwrap();
        assert_eq!(rescale, vec![0.0]);
        assert_eq!(st.m, vec![2.0]);
        let sum: f64 = p.row(0).iter().sum();
        assert_eq!(st.ell, vec![sum]);
        assert_eq!(p[(0, 1)], 1.0);
    }

    #[test]
    fn constant_block_adds_width() {
        let s = Matrix::filled(2, 5, 0.75);
        let mut st = SoftmaxState::new(2);
        st.m = vec![0.75, 0.75];
        st.ell = vec![1.0, 2.0];
        let (p, rescale, st) = online_softmax_step(&st, &s).unwrap();
        assert!(p.as_slice().iter().all(|&x| x == 1.0));
        assert_eq!(rescale, vec![1.0, 1.0]);
        assert_eq!(st.ell, vec![6.0, 7.0]);
    }

    #[test]
    fn two_steps_equal_one_shot() {
        for seed in 0..20 {
            let a = sample_normal_matrix(2, 2, seed, Stream::Custom(1)).map(|x| 3.0 * x);
            let b = sample_normal_matrix(2, 2, seed, Stream::Custom(2)).map(|x| 3.0 * x);
            let (_, _, st) = online_softmax_step(&SoftmaxState::new(2), &a).unwrap();
            let (_, _, st) = online_softmax_step(&st, &b).unwrap();
            for r in 0..2 {
                let all = [a[(r, 0)], a[(r, 1)], b[(r, 0)], b[(r, 1)]];
                let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ell: f64 = all.iter().map(|x| (x - m).exp()).sum();
                assert_eq!(st.m[r], m);
                assert!((st.ell[r] - ell).abs() <= 1e-14 * ell);
            }
        }
    }

    #[test]
    fn fully_masked_rows_stay_empty() {
        let s = Matrix::filled(1, 3, f64::NEG_INFINITY);
        let (p, rescale, st) = online_softmax_step(&SoftmaxState::new(1), &s).unwrap();
        assert_eq!(p.amax(), 0.0);
        assert_eq!(rescale, vec![0.0]);
        assert_eq!(st.logsumexp(), vec![f64::NEG_INFINITY]);
        assert!(online_softmax_step(&SoftmaxState::new(2), &s).is_err());
    }
}
