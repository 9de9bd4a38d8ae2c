//! Ground-truth attention: dense FP64 forward/backward, the low-precision
//! "standard attention" baselines, and query-head to kv-head grouping.

mod heads;
mod lowprec;
mod standard;

pub use heads::{gqa_expand, HeadMap};
pub use lowprec::baseline_lowprec_attention;
pub use standard::{std_attention_bwd, std_attention_fwd, std_attention_output, StdForward};

use crate::dense::Matrix;
use crate::error::{mismatch, Error, Result};

/// Borrowed attention operands. `q` is `M×d`, `k` is `N×d`, `v` is `N×d_v`.
///
/// The causal mask hides column `j` from row `i` whenever `j > i`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub alpha: f64,
    pub causal: bool,
}

impl<'a> AttentionInputs<'a> {
    /// Non-causal inputs with `alpha = 1/√d`.
    pub fn new(q: &'a Matrix, k: &'a Matrix, v: &'a Matrix) -> Result<Self> {
        let inputs = AttentionInputs {
            q,
            k,
            v,
            alpha: 1.0 / (q.cols() as f64).sqrt(),
            causal: false,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.rows() == 0 || self.k.rows() == 0 {
            return Err(Error::Empty("attention sequence length"));
        }
        if self.q.cols() == 0 || self.v.cols() == 0 {
            return Err(Error::Empty("attention head dimension"));
        }
        if self.q.cols() != self.k.cols() {
            return Err(mismatch(
                "attention",
                format!("Q has d={} but K has d={}", self.q.cols(), self.k.cols()),
            ));
        }
        if self.k.rows() != self.v.rows() {
            return Err(mismatch(
                "attention",
                format!("K has {} rows but V has {}", self.k.rows(), self.v.rows()),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(crate::error::invalid(
                "alpha",
                format!("{} is not finite", self.alpha),
            ));
        }
        Ok(())
    }

    pub fn query_len(&self) -> usize {
        self.q.rows()
    }

    pub fn kv_len(&self) -> usize {
        self.k.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    #[inline]
    pub fn masked(&self, row: usize, col: usize) -> bool {
        self.causal && col > row
    }
}

/// Gradients of a scalar loss with respect to Q, K and V.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl AttentionGrads {
    /// Largest entrywise difference over all three gradients.
    pub fn max_abs_diff(&self, other: &AttentionGrads) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}
