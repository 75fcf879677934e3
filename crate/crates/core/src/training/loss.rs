//! Classification and distance losses.

use crate::ec_parser::Polarity;
use crate::error::{check_dim, Error, Result};
use crate::matcher::{MatchLabel, NUM_CLASSES};
use crate::tensor::{cosine, cosine_backward};

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-sum_k [y_k ln p_k + (1 - y_k) ln(1 - p_k)]` with clamped probabilities.
pub fn classification_loss(probs: &[f64], y: &[f64]) -> Result<f64> {
    check_dim("class probabilities", NUM_CLASSES, probs.len())?;
    check_dim("label vector", NUM_CLASSES, y.len())?;
    Ok(-probs
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>())
}

/// `dL_c/dp`; zero where the clamp is active.
pub fn classification_loss_grad(probs: &[f64], y: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            if clamp_prob(p) != p {
                0.0
            } else {
                -y / p + (1.0 - y) / (1.0 - p)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DistanceBranch {
    Pull,
    Push,
}

fn branch(polarity: Polarity, label: MatchLabel) -> Option<DistanceBranch> {
    match (polarity, label) {
        (Polarity::Inclusion, MatchLabel::Match) => Some(DistanceBranch::Pull),
        (Polarity::Exclusion, MatchLabel::Mismatch) => Some(DistanceBranch::Push),
        _ => None,
    }
}

/// Inclusion/match pairs: `1 - cos`. Exclusion/mismatch pairs:
/// `max(0, cos - margin)`. Every other pair, or a zero vector, contributes 0.
pub fn distance_loss(e_proj: &[f64], retrieved: &[f64], polarity: Polarity, label: MatchLabel, margin: f64) -> f64 {
    let Some(b) = branch(polarity, label) else {
        return 0.0;
    };
    let Some(c) = cosine(e_proj, retrieved) else {
        tracing::warn!("zero vector in distance loss; contribution set to 0");
        return 0.0;
    };
    distance_from_cosine(b, c, margin)
}

/// The distance loss given a cosine value directly.
pub fn distance_from_cosine_for(polarity: Polarity, label: MatchLabel, cos: f64, margin: f64) -> f64 {
    branch(polarity, label).map_or(0.0, |b| distance_from_cosine(b, cos, margin))
}

fn distance_from_cosine(b: DistanceBranch, c: f64, margin: f64) -> f64 {
    match b {
        DistanceBranch::Pull => 1.0 - c,
        DistanceBranch::Push => (c - margin).max(0.0),
    }
}

/// Gradients of the distance loss with respect to `e_proj` and `retrieved`;
/// `None` when the loss is inactive (including the hinge's flat region).
pub fn distance_loss_grad(
    e_proj: &[f64],
    retrieved: &[f64],
    polarity: Polarity,
    label: MatchLabel,
    margin: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let b = branch(polarity, label)?;
    let c = cosine(e_proj, retrieved)?;
    let sign = match b {
        DistanceBranch::Pull => -1.0,
        DistanceBranch::Push if c > margin => 1.0,
        DistanceBranch::Push => return None,
    };
    let (da, db) = cosine_backward(e_proj, retrieved)?;
    Some((
        da.into_iter().map(|g| sign * g).collect(),
        db.into_iter().map(|g| sign * g).collect(),
    ))
}

/// Per-pair loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub classification: f64,
    pub distance: f64,
}

/// Mean of `L_c + L_d` over a batch.
pub fn total_loss(batch: &[PairLoss]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch.iter().map(|p| p.classification + p.distance).sum::<f64>() / batch.len() as f64)
}
