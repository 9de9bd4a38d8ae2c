//! Gradient check of the blocked backward pass on small random instances:
//! against the dense backward pass and against central differences of the
//! loss `⟨dO, O⟩`.

use serde::{Deserialize, Serialize};

use crate::dense::{sample_normal_matrix, Matrix, SeededRng, Stream};
use crate::error::{invalid, Result};
use crate::flash::{flash_bwd, flash_fwd_basic, TileConfig};
use crate::reference::{
    std_attention_bwd, std_attention_fwd, std_attention_output, AttentionInputs,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Sequence lengths are drawn from `1..=max_seqlen`.
    pub max_seqlen: usize,
    pub headdims: Vec<usize>,
    pub seed: u64,
    pub step: f64,
    /// Tolerance against the dense backward pass.
    pub exact_tol: f64,
    /// Tolerance against central differences.
    pub fd_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 60,
            max_seqlen: 16,
            headdims: vec![4, 8, 16],
            seed: 0,
            step: 1e-5,
            exact_tol: 1e-11,
            fd_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub instance: usize,
    pub seqlen: usize,
    pub headdim: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub causal: bool,
    pub exact_err: f64,
    pub fd_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_exact_err(&self) -> f64 {
        self.cases.iter().map(|c| c.exact_err).fold(0.0, f64::max)
    }

    pub fn max_fd_err(&self) -> f64 {
        self.cases.iter().map(|c| c.fd_err).fold(0.0, f64::max)
    }
}

fn loss(inputs: &AttentionInputs, d_o: &Matrix) -> Result<f64> {
    let (o, _) = std_attention_output(inputs)?;
    Ok(o.as_slice()
        .iter()
        .zip(d_o.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Central-difference gradient of `⟨dO, O⟩` with respect to one operand.
fn numeric_grad(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    causal: bool,
    which: usize,
    h: f64,
) -> Result<Matrix> {
    let mut ops = [q.clone(), k.clone(), v.clone()];
    let alpha = 1.0 / (q.cols() as f64).sqrt();
    let (rows, cols) = ops[which].shape();
    let mut g = Matrix::zeros(rows, cols);
    for idx in 0..rows * cols {
        let x = ops[which].as_slice()[idx];
        let mut eval = |val: f64| -> Result<f64> {
            ops[which].as_mut_slice()[idx] = val;
            let inputs = AttentionInputs::new(&ops[0], &ops[1], &ops[2])?
                .with_alpha(alpha)
                .with_causal(causal);
            loss(&inputs, d_o)
        };
        let up = eval(x + h)?;
        let down = eval(x - h)?;
        ops[which].as_mut_slice()[idx] = x;
        g.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 {
        return Err(invalid("instances", "must be at least 1"));
    }
    if cfg.max_seqlen == 0 || cfg.headdims.is_empty() || cfg.headdims.contains(&0) {
        return Err(invalid("max_seqlen", "sizes must be positive"));
    }
    if !(cfg.step > 0.0) {
        return Err(invalid("step", "must be positive"));
    }
    let mut pick = SeededRng::new(cfg.seed, Stream::Custom(0));
    let mut draw = |n: usize| (pick.next_u64() % n as u64) as usize;
    let mut cases = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let n = 1 + draw(cfg.max_seqlen);
        let d = cfg.headdims[draw(cfg.headdims.len())];
        let br = 1 + draw(n.min(8));
        let bc = 1 + draw(n.min(8));
        let causal = instance % 2 == 1;
        let seed = cfg
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(instance as u64);
        let q = sample_normal_matrix(n, d, seed, Stream::Query);
        let k = sample_normal_matrix(n, d, seed, Stream::Key);
        let v = sample_normal_matrix(n, d, seed, Stream::Value);
        let d_o = sample_normal_matrix(n, d, seed, Stream::OutputGrad);
        let inputs = AttentionInputs::new(&q, &k, &v)?.with_causal(causal);
        let tile = TileConfig::new(br, bc)?;
        let fwd = flash_fwd_basic(&inputs, &tile)?;
        let grads = flash_bwd(&inputs, &fwd.o, &d_o, &fwd.l, &tile)?;
        let exact = std_attention_bwd(&inputs, &std_attention_fwd(&inputs)?.p, &d_o)?;
        let exact_err = grads.max_abs_diff(&exact);
        let mut fd_err: f64 = 0.0;
        for (which, g) in [&grads.dq, &grads.dk, &grads.dv].into_iter().enumerate() {
            let num = numeric_grad(&q, &k, &v, &d_o, causal, which, cfg.step)?;
            fd_err = fd_err.max(g.max_abs_diff(&num));
        }
        cases.push(GradcheckCase {
            instance,
            seqlen: n,
            headdim: d,
            block_rows: br,
            block_cols: bc,
            causal,
            exact_err,
            fd_err,
            passed: exact_err <= cfg.exact_tol && fd_err <= cfg.fd_tol,
        });
    }
    Ok(GradcheckReport {
        config: cfg.clone(),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_instances_pass() {
        let cfg = GradcheckConfig {
            instances: 6,
            max_seqlen: 9,
            ..GradcheckConfig::default()
        };
        let r = run_gradcheck(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.cases);
        assert_eq!(r.cases.len(), 6);
        assert!(r.cases.iter().all(|c| c.seqlen <= 9));
        assert_eq!(r, run_gradcheck(&cfg).unwrap());
    }

    #[test]
    fn numeric_gradient_of_linear_case() {
        // One key: O = V regardless of Q, so dL/dV = dO and dL/dQ = 0.
        let q = Matrix::from_rows(&[[0.3, -1.0]]).unwrap();
        let k = Matrix::from_rows(&[[2.0, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let d_o = Matrix::from_rows(&[[0.25, 4.0]]).unwrap();
        let gv = numeric_grad(&q, &k, &v, &d_o, false, 2, 1e-5).unwrap();
        assert!(gv.max_abs_diff(&d_o) < 1e-9);
        let gq = numeric_grad(&q, &k, &v, &d_o, false, 0, 1e-5).unwrap();
        assert!(gq.amax() < 1e-9);
    }

    #[test]
    fn zero_instances_rejected() {
        let cfg = GradcheckConfig {
            instances: 0,
            ..GradcheckConfig::default()
        };
        assert!(run_gradcheck(&cfg).is_err());
    }
}
