//! Semantic feature fusion: single-head attention across the proposals of
//! one image. Class-score values are mixed with the plain attention;
//! region-feature values with a confidence-weighted attention whose rows
//! are bounded by a threshold `T`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::ppg::{confidence_vector, ProposalBatch};

/// How rows of the weighted attention are bounded by `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Rescale each row so its maximum equals `T`.
    Scaling,
    /// Elementwise `min(x, T)`.
    Clamping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    InvSqrtN,
    InvN,
}

impl ThresholdRule {
    pub fn threshold(self, n_datasets: usize) -> f64 {
        let n = n_datasets.max(1) as f64;
        match self {
            ThresholdRule::InvSqrtN => 1.0 / n.sqrt(),
            ThresholdRule::InvN => 1.0 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SffConfig {
    pub mode: FusionMode,
    pub t_rule: ThresholdRule,
    /// Attention width `d`.
    pub dim: usize,
    /// Bound the similarities before the softmax instead of after it.
    pub clamp_before_softmax: bool,
}

impl Default for SffConfig {
    fn default() -> Self {
        SffConfig {
            mode: FusionMode::Scaling,
            t_rule: ThresholdRule::InvSqrtN,
            dim: 16,
            clamp_before_softmax: false,
        }
    }
}

impl SffConfig {
    pub fn variant_name(&self) -> String {
        let m = match self.mode {
            FusionMode::Scaling => "scaling",
            FusionMode::Clamping => "clamping",
        };
        let t = match self.t_rule {
            ThresholdRule::InvSqrtN => "1/sqrt(N)",
            ThresholdRule::InvN => "1/N",
        };
        format!("{m}@{t}")
    }
}

/// The four mode/threshold combinations, clamping first.
pub fn variants(base: &SffConfig) -> Vec<SffConfig> {
    let mut out = Vec::new();
    for mode in [FusionMode::Clamping, FusionMode::Scaling] {
        for t_rule in [ThresholdRule::InvN, ThresholdRule::InvSqrtN] {
            out.push(SffConfig {
                mode,
                t_rule,
                ..base.clone()
            });
        }
    }
    out
}

/// Projection weights: `w_q`, `w_k`, `w_vr` map region features (width
/// `f`) to `d`; `w_vc` maps global score vectors (width total+1) to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SffParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_vc: Matrix,
    pub w_vr: Matrix,
    pub n_datasets: usize,
    pub config: SffConfig,
}

impl SffParams {
    pub fn init<R: Rng>(feat_dim: usize, score_width: usize, n_datasets: usize, config: SffConfig, rng: &mut R) -> Self {
        let mut draw = |rows: usize, cols: usize| {
            let b = 1.0 / (rows.max(1) as f64).sqrt();
            Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-b..=b)).collect()).expect("finite")
        };
        let d = config.dim;
        SffParams {
            w_q: draw(feat_dim, d),
            w_k: draw(feat_dim, d),
            w_vc: draw(score_width, d),
            w_vr: draw(feat_dim, d),
            n_datasets,
            config,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.config.t_rule.threshold(self.n_datasets)
    }
}

/// Handles of the four projections on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SffVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_vc: Var,
    pub w_vr: Var,
}

/// Intermediate nodes of one fusion.
#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    pub a: Var,
    pub a_soft: Var,
    pub a_weighted: Var,
    pub v_r: Var,
    pub sa: Var,
}

/// Record the fusion on `tape`:
/// `SA = softmax(A)·V_c + f_T(softmax(A ∘ S_c))·V_r` with `A = QKᵀ/√d`,
/// `V_c = C·W_Vc`, `V_r = X·W_Vr` and column `j` of `A` scaled by `S_c[j]`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    x: Var,
    scores: Var,
    s_c: &[f64],
    w: &SffVars,
    config: &SffConfig,
    threshold: f64,
) -> Result<FusedVars> {
    let d = tape.value(w.w_q).cols();
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let qk = tape.matmul_t(q, k)?;
    let a = tape.scale(qk, 1.0 / (d as f64).sqrt());
    let a_soft = tape.row_softmax(a);
    let weighted = tape.scale_cols(a, s_c)?;
    let bound = |tape: &mut Tape, v: Var| match config.mode {
        FusionMode::Scaling => tape.scale_rows_to_max(v, threshold),
        FusionMode::Clamping => tape.clamp_rows(v, threshold),
    };
    let a_weighted = if config.clamp_before_softmax {
        let b = bound(tape, weighted);
        tape.row_softmax(b)
    } else {
        let s = tape.row_softmax(weighted);
        bound(tape, s)
    };
    let v_c = tape.matmul(scores, w.w_vc)?;
    let v_r = tape.matmul(x, w.w_vr)?;
    let left = tape.matmul(a_soft, v_c)?;
    let right = tape.matmul(a_weighted, v_r)?;
    let sa = tape.add(left, right)?;
    Ok(FusedVars {
        a,
        a_soft,
        a_weighted,
        v_r,
        sa,
    })
}

/// Attention matrices and fused output of one image, for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub threshold: f64,
    pub a: Matrix,
    pub a_soft: Matrix,
    pub a_weighted: Matrix,
    pub sa: Matrix,
}

fn check_rows(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// `A = (X·W_Q)(X·W_K)ᵀ / √d`.
pub fn attention_matrix(roi: &Matrix, params: &SffParams) -> Result<Matrix> {
    let q = roi.matmul(&params.w_q)?;
    let k = roi.matmul(&params.w_k)?;
    Ok(q.matmul_t(&k)?.scale(1.0 / (params.config.dim as f64).sqrt()))
}

/// Forward-only fusion over explicit score vectors and confidences.
pub fn fuse(roi: &Matrix, scores: &Matrix, s_c: &[f64], params: &SffParams) -> Result<(Matrix, FusionTrace)> {
    check_rows("fuse", roi, scores)?;
    let mut tape = Tape::new();
    let x = tape.leaf(roi.clone());
    let c = tape.leaf(scores.clone());
    let w = SffVars {
        w_q: tape.leaf(params.w_q.clone()),
        w_k: tape.leaf(params.w_k.clone()),
        w_vc: tape.leaf(params.w_vc.clone()),
        w_vr: tape.leaf(params.w_vr.clone()),
    };
    let t = params.threshold();
    let f = fuse_on_tape(&mut tape, x, c, s_c, &w, &params.config, t)?;
    let trace = FusionTrace {
        threshold: t,
        a: tape.value(f.a).clone(),
        a_soft: tape.value(f.a_soft).clone(),
        a_weighted: tape.value(f.a_weighted).clone(),
        sa: tape.value(f.sa).clone(),
    };
    Ok((trace.sa.clone(), trace))
}

/// [`fuse`] with scores and confidences taken from a proposal batch.
pub fn fuse_batch(roi: &Matrix, batch: &ProposalBatch, params: &SffParams) -> Result<(Matrix, FusionTrace)> {
    fuse(roi, &batch.score_matrix(), &confidence_vector(batch), params)
}

impl fmt::Display for FusionTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "T = {:.6}", self.threshold)?;
        for r in 0..self.a_weighted.rows() {
            let row: Vec<String> = self.a_weighted.row(r).iter().map(|v| format!("{v:.4}")).collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random(rows: usize, cols: usize, s: u64) -> Matrix {
        let mut rng = seed::rng(s, "m", 0);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(f: usize, w: usize, d: usize, cfg: SffConfig) -> SffParams {
        SffParams::init(f, w, 3, SffConfig { dim: d, ..cfg }, &mut seed::rng(1, "p", 0))
    }

    #[test]
    fn thresholds() {
        assert!((ThresholdRule::InvSqrtN.threshold(3) - 0.577350269189626).abs() < 1e-12);
        assert_eq!(ThresholdRule::InvN.threshold(4), 0.25);
        let names: Vec<String> = variants(&SffConfig::default()).iter().map(SffConfig::variant_name).collect();
        assert_eq!(names, ["clamping@1/N", "clamping@1/sqrt(N)", "scaling@1/N", "scaling@1/sqrt(N)"]);
    }

    #[test]
    fn hand_attention() {
        let mut p = params(1, 1, 1, SffConfig::default());
        p.w_q = Matrix::scalar(1.0);
        p.w_k = Matrix::scalar(1.0);
        let roi = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let mut p2 = p.clone();
        p2.w_k = Matrix::scalar(2.0);
        // Q = [1;2], K = [2;4] -> [[2,4],[4,8]]
        let a = attention_matrix(&roi, &p2).unwrap();
        assert_eq!(a.data(), &[2.0, 4.0, 4.0, 8.0]);
        let s = attention_matrix(&random(5, 1, 2), &p).unwrap();
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn single_proposal_closed_form() {
        let p = params(3, 4, 2, SffConfig::default());
        let roi = random(1, 3, 3);
        let c = Matrix::row_vector(vec![0.0, 0.8, 0.0, 0.0]);
        let (sa, _) = fuse(&roi, &c, &[0.8], &p).unwrap();
        let vc = c.matmul(&p.w_vc).unwrap();
        let vr = roi.matmul(&p.w_vr).unwrap();
        let t = 1.0 / 3f64.sqrt();
        for j in 0..2 {
            assert!((sa.get(0, j) - (vc.get(0, j) + t * vr.get(0, j))).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut p = params(3, 4, 2, SffConfig::default());
        p.w_vr = Matrix::zeros(3, 2);
        let (sa, _) = fuse(&random(4, 3, 5), &Matrix::zeros(4, 4), &[1.0; 4], &p).unwrap();
        assert!(sa.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lower_confidence_draws_less_attention() {
        // N = 1 makes T = 1, so clamping is inactive and the weighted branch
        // is the plain softmax of the column-scaled similarities
        let mut p = params(3, 4, 2, SffConfig {
            mode: FusionMode::Clamping,
            ..SffConfig::default()
        });
        p.n_datasets = 1;
        let roi = random(4, 3, 6);
        let c = random(4, 4, 7).map(f64::abs);
        let (_, full) = fuse(&roi, &c, &[1.0; 4], &p).unwrap();
        let (_, low) = fuse(&roi, &c, &[1.0, 0.0, 1.0, 1.0], &p).unwrap();
        for i in [0, 2, 3] {
            if full.a.get(i, 1) > 0.0 {
                assert!(low.a_weighted.get(i, 1) < full.a_weighted.get(i, 1));
            }
        }
        assert_eq!(low.a_soft, full.a_soft);
    }
}
