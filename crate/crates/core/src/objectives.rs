//! Training objectives on scalar scores.
//!
//! The ranking loss works on membership scores, the asymmetry losses on
//! containment probabilities. Every loss comes with its partial derivatives
//! so the trainer can chain them back into the mapper and volume weights.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("ranking loss needs at least one negative score")]
    NoNegatives,

    #[error("lambda must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    pub gamma_p: f64,
    pub gamma_n: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { gamma_p: 0.6, gamma_n: 0.4 }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Ranking loss value with its partials.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingGrad {
    pub value: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `-ln σ(pos - γp) - (1/k) Σ ln σ(γn - neg_j)`.
pub fn ranking_loss(pos_score: f64, neg_scores: &[f64], margins: Margins) -> Result<f64> {
    ranking_loss_grad(pos_score, neg_scores, margins).map(|g| g.value)
}

pub fn ranking_loss_grad(pos_score: f64, neg_scores: &[f64], margins: Margins) -> Result<RankingGrad> {
    if neg_scores.is_empty() {
        return Err(ObjectiveError::NoNegatives);
    }
    let k = neg_scores.len() as f64;
    let pos_arg = pos_score - margins.gamma_p;
    let mut value = -log_sigmoid(pos_arg);
    // d/dx [-ln σ(x)] = -σ(-x)
    let d_pos = -crate::algebra::sigmoid(-pos_arg);
    let mut neg_sum = 0.0;
    let d_negs = neg_scores
        .iter()
        .map(|&s| {
            let arg = margins.gamma_n - s;
            neg_sum += log_sigmoid(arg);
            crate::algebra::sigmoid(-arg) / k
        })
        .collect();
    value -= neg_sum / k;
    Ok(RankingGrad { value, d_pos, d_negs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryGrad {
    pub asym_pos: f64,
    pub asym_neg: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `((p_pos - 1)^2, mean_j p_j^2)`; an empty negative list contributes zero.
pub fn asymmetry_losses(p_pos: f64, p_negs: &[f64]) -> (f64, f64) {
    let g = asymmetry_losses_grad(p_pos, p_negs);
    (g.asym_pos, g.asym_neg)
}

pub fn asymmetry_losses_grad(p_pos: f64, p_negs: &[f64]) -> AsymmetryGrad {
    let asym_pos = (p_pos - 1.0) * (p_pos - 1.0);
    let d_pos = 2.0 * (p_pos - 1.0);
    if p_negs.is_empty() {
        return AsymmetryGrad { asym_pos, asym_neg: 0.0, d_pos, d_negs: Vec::new() };
    }
    let k = p_negs.len() as f64;
    let asym_neg = p_negs.iter().map(|p| p * p).sum::<f64>() / k;
    let d_negs = p_negs.iter().map(|p| 2.0 * p / k).collect();
    AsymmetryGrad { asym_pos, asym_neg, d_pos, d_negs }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ranking: f64,
    pub asym_pos: f64,
    pub asym_neg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Partials of `total` w.r.t. `(ranking, asym_pos, asym_neg)`.
    pub fn partials(&self) -> (f64, f64, f64) {
        (1.0, self.lambda, self.lambda)
    }
}

pub fn total_loss(ranking: f64, asym_pos: f64, asym_neg: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ObjectiveError::InvalidLambda(lambda));
    }
    Ok(LossBreakdown { ranking, asym_pos, asym_neg, total: ranking + lambda * (asym_pos + asym_neg), lambda })
}
