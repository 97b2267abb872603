//! Prompt cross-entropy, the correlation-weighted causal contrastive loss and
//! the joint objective.
//!
//! For an ordered sequence of representations `h_1..h_n` with labels
//! `y_1..y_n`, anchor `i` is compared against its predecessors
//! `A(i) = {1..i-1}`; `S(i)` is the same-class subset. With weights
//! `w_ij = 1 / alpha[y_i][y_j]`:
//!
//! ```text
//! L_i = -(1/|S(i)|) * log( sum_{k in S(i)} w_ik exp(h_i.h_k / tau)
//!                          / sum_{j in A(i)} w_ij exp(h_i.h_j / tau) )
//! ```
//!
//! The log is taken of the summed ratio. Anchors with empty `S(i)` contribute 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::WeightMatrix;
use crate::matrix::dot;
use crate::par::{self, Execution};

/// Probabilities below this are clamped in [`prompt_ce`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
    #[error("label index {0} is not covered by the weight matrix")]
    UnknownLabel(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("representations have inconsistent dimensions")]
    RaggedRepresentations,
    #[error("step {step}: distribution sums to {sum}")]
    NotNormalized { step: usize, sum: f64 },
    #[error("step {step}: target index {target} outside a distribution of size {size}")]
    TargetOutOfRange { step: usize, target: usize, size: usize },
    #[error("empty batch")]
    Empty,
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptCe {
    pub value: f64,
    /// Number of target probabilities that fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

/// `-sum_t log p_t(target_t)` over the chain steps.
pub fn prompt_ce(distributions: &[Vec<f64>], targets: &[usize]) -> Result<PromptCe> {
    if distributions.len() != targets.len() {
        return Err(LossError::LengthMismatch { left: distributions.len(), right: targets.len() });
    }
    let mut value = 0.0;
    let mut clamped = 0;
    for (step, (p, &target)) in distributions.iter().zip(targets).enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
            return Err(LossError::NotNormalized { step, sum });
        }
        let q = *p.get(target).ok_or(LossError::TargetOutOfRange { step, target, size: p.len() })?;
        let q = if q < PROB_FLOOR {
            clamped += 1;
            log::warn!("step {step}: target probability {q:e} clamped to {PROB_FLOOR:e}");
            PROB_FLOOR
        } else {
            q
        };
        value -= q.ln();
    }
    Ok(PromptCe { value, clamped })
}

/// Gradient of `-log p(target)` with respect to the logits that produced the
/// softmax `p`.
pub fn ce_logit_grad(p: &[f64], target: usize) -> Vec<f64> {
    let mut g = p.to_vec();
    g[target] -= 1.0;
    g
}

/// Ordered representations and their label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorContext {
    h: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl AnchorContext {
    pub fn new(h: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if h.len() != labels.len() {
            return Err(LossError::LengthMismatch { left: h.len(), right: labels.len() });
        }
        if let Some(first) = h.first() {
            if h.iter().any(|v| v.len() != first.len()) {
                return Err(LossError::RaggedRepresentations);
            }
        }
        Ok(Self { h, labels })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn representations(&self) -> &[Vec<f64>] {
        &self.h
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `|S(i)|`: earlier samples sharing anchor `i`'s label.
    pub fn positives(&self, i: usize) -> usize {
        self.labels[..i].iter().filter(|&&y| y == self.labels[i]).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftClOutput {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    /// Anchors with a non-empty positive set.
    pub contributing: usize,
}

fn check(ctx: &AnchorContext, alpha: &WeightMatrix, tau: f64) -> Result<()> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(LossError::BadTau(tau));
    }
    if let Some(&bad) = ctx.labels.iter().find(|&&y| y >= alpha.len()) {
        return Err(LossError::UnknownLabel(bad));
    }
    Ok(())
}

/// Shifted logits `z_j = h_i.h_j / tau - ln alpha_ij - max` over `A(i)`.
fn anchor_logits(ctx: &AnchorContext, alpha: &WeightMatrix, tau: f64, i: usize) -> Vec<f64> {
    let hi = &ctx.h[i];
    let yi = ctx.labels[i];
    let sims: Vec<f64> = ctx.h[..i].iter().map(|hj| dot(hi, hj) / tau).collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    sims.iter()
        .zip(&ctx.labels[..i])
        .map(|(s, &yj)| s - max - alpha.get(yi, yj).ln())
        .collect()
}

fn log_sum_exp<'a>(z: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = z.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn anchor_loss(ctx: &AnchorContext, alpha: &WeightMatrix, tau: f64, i: usize) -> f64 {
    let n_pos = ctx.positives(i);
    if n_pos == 0 {
        return 0.0;
    }
    let yi = ctx.labels[i];
    let z = anchor_logits(ctx, alpha, tau, i);
    let pos = z.iter().zip(&ctx.labels[..i]).filter(|(_, &y)| y == yi).map(|(v, _)| v);
    let log_num = log_sum_exp(pos);
    let log_den = log_sum_exp(z.iter());
    // log_num <= log_den up to rounding; the term is non-negative by construction.
    (-(log_num - log_den) / n_pos as f64).max(0.0)
}

/// Weighted causal contrastive loss over every anchor.
pub fn softcl(ctx: &AnchorContext, alpha: &WeightMatrix, tau: f64) -> Result<SoftClOutput> {
    softcl_from(ctx, alpha, tau, 0, Execution::Sequential)
}

/// Like [`softcl`] but only anchors `first_anchor..` are scored; earlier
/// entries act purely as predecessors. `per_anchor` is indexed from
/// `first_anchor`.
pub fn softcl_from(
    ctx: &AnchorContext,
    alpha: &WeightMatrix,
    tau: f64,
    first_anchor: usize,
    exec: Execution,
) -> Result<SoftClOutput> {
    check(ctx, alpha, tau)?;
    let first = first_anchor.min(ctx.len());
    let per_anchor = par::map_range(exec, ctx.len() - first, |k| anchor_loss(ctx, alpha, tau, first + k));
    let contributing = (first..ctx.len()).filter(|&i| ctx.positives(i) > 0).count();
    let total = per_anchor.iter().sum();
    Ok(SoftClOutput { total, per_anchor, contributing })
}

/// Loss terms and the gradient of their sum with respect to every
/// representation in `ctx` (including those before `first_anchor`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftClGrad {
    pub output: SoftClOutput,
    pub grad: Vec<Vec<f64>>,
}

struct AnchorGrad {
    loss: f64,
    /// d loss / d h_i
    anchor: Vec<f64>,
    /// d loss / d h_j for j < i
    predecessors: Vec<Vec<f64>>,
}

fn anchor_grad(ctx: &AnchorContext, alpha: &WeightMatrix, tau: f64, i: usize) -> AnchorGrad {
    let dim = ctx.h[i].len();
    let n_pos = ctx.positives(i);
    if n_pos == 0 {
        return AnchorGrad { loss: 0.0, anchor: vec![0.0; dim], predecessors: Vec::new() };
    }
    let yi = ctx.labels[i];
    let z = anchor_logits(ctx, alpha, tau, i);
    let is_pos: Vec<bool> = ctx.labels[..i].iter().map(|&y| y == yi).collect();
    let log_num = log_sum_exp(z.iter().zip(&is_pos).filter(|(_, &p)| p).map(|(v, _)| v));
    let log_den = log_sum_exp(z.iter());
    let loss = -(log_num - log_den) / n_pos as f64;
    let scale = -1.0 / n_pos as f64;
    let mut anchor = vec![0.0; dim];
    let mut predecessors = Vec::with_capacity(i);
    for (j, (&zj, &pos)) in z.iter().zip(&is_pos).enumerate() {
        let num_share = if pos { (zj - log_num).exp() } else { 0.0 };
        let den_share = (zj - log_den).exp();
        // d loss / d z_j
        let dz = scale * (num_share - den_share);
        let hj = &ctx.h[j];
        for (a, &v) in anchor.iter_mut().zip(hj) {
            *a += dz * v / tau;
        }
        predecessors.push(ctx.h[i].iter().map(|&v| dz * v / tau).collect());
    }
    AnchorGrad { loss: loss.max(0.0), anchor, predecessors }
}

pub fn softcl_grad(
    ctx: &AnchorContext,
    alpha: &WeightMatrix,
    tau: f64,
    first_anchor: usize,
    exec: Execution,
) -> Result<SoftClGrad> {
    check(ctx, alpha, tau)?;
    let first = first_anchor.min(ctx.len());
    let dim = ctx.h.first().map_or(0, Vec::len);
    let parts = par::map_range(exec, ctx.len() - first, |k| anchor_grad(ctx, alpha, tau, first + k));
    let mut grad = vec![vec![0.0; dim]; ctx.len()];
    let mut per_anchor = Vec::with_capacity(parts.len());
    for (k, part) in parts.into_iter().enumerate() {
        let i = first + k;
        per_anchor.push(part.loss);
        for (g, v) in grad[i].iter_mut().zip(&part.anchor) {
            *g += v;
        }
        for (j, pg) in part.predecessors.iter().enumerate() {
            for (g, v) in grad[j].iter_mut().zip(pg) {
                *g += v;
            }
        }
    }
    let contributing = (first..ctx.len()).filter(|&i| ctx.positives(i) > 0).count();
    let total = per_anchor.iter().sum();
    Ok(SoftClGrad { output: SoftClOutput { total, per_anchor, contributing }, grad })
}

/// Unweighted causal supervised contrastive loss (same log placement, every
/// pair weight 1), written without the weighted-softmax machinery above. The
/// trainer uses it as the plain baseline objective.
pub mod supcon {
    use super::*;

    /// Returns per-anchor losses for anchors `first..` and the gradient of
    /// their sum with respect to every row of `h`.
    pub fn loss_and_grad(
        h: &[Vec<f64>],
        labels: &[usize],
        tau: f64,
        first: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if tau <= 0.0 || tau.is_nan() {
            return Err(LossError::BadTau(tau));
        }
        if h.len() != labels.len() {
            return Err(LossError::LengthMismatch { left: h.len(), right: labels.len() });
        }
        let n = h.len();
        let dim = h.first().map_or(0, Vec::len);
        let mut grad = vec![vec![0.0; dim]; n];
        let mut losses = Vec::new();
        for i in first.min(n)..n {
            let positives: Vec<usize> = (0..i).filter(|&j| labels[j] == labels[i]).collect();
            if positives.is_empty() {
                losses.push(0.0);
                continue;
            }
            let s: Vec<f64> = (0..i).map(|j| dot(&h[i], &h[j]) / tau).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let all: f64 = e.iter().sum();
            let pos: f64 = positives.iter().map(|&j| e[j]).sum();
            let c = positives.len() as f64;
            losses.push((all.ln() - pos.ln()) / c);
            for j in 0..i {
                let p = e[j] / all;
                let q = if labels[j] == labels[i] { e[j] / pos } else { 0.0 };
                let ds = (p - q) / c / tau;
                for d in 0..dim {
                    grad[i][d] += ds * h[j][d];
                    grad[j][d] += ds * h[i][d];
                }
            }
        }
        Ok((losses, grad))
    }
}

/// Batch-level summary of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean prompt cross-entropy over the batch.
    pub prompt_ce: f64,
    /// Mean contrastive term over the batch (empty-positive anchors count as 0).
    pub softcl: f64,
    pub total: f64,
    pub n_contributing_anchors: usize,
}

/// `(1/n) * sum_i (prompt_ce_i + softcl_i)`.
pub fn joint_loss(prompt_ce: &[f64], softcl: &[f64], n_contributing_anchors: usize) -> Result<LossBreakdown> {
    if prompt_ce.len() != softcl.len() {
        return Err(LossError::LengthMismatch { left: prompt_ce.len(), right: softcl.len() });
    }
    if prompt_ce.is_empty() {
        return Err(LossError::Empty);
    }
    let n = prompt_ce.len() as f64;
    let total = prompt_ce.iter().zip(softcl).map(|(a, b)| a + b).sum::<f64>() / n;
    Ok(LossBreakdown {
        prompt_ce: prompt_ce.iter().sum::<f64>() / n,
        softcl: softcl.iter().sum::<f64>() / n,
        total,
        n_contributing_anchors,
    })
}
