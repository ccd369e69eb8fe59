//! Joint domain-adaptation loss terms: discriminator, covariance alignment,
//! twin-classifier discrepancy, classification, and their weighted sum.
//!
//! These are the scalar definitions; gradient routing through a model column
//! lives in [`crate::nn::grad`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied before every logarithm.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourcePretrain,
    TargetAdapt,
}

/// Weights of the joint loss. `grl_coefficient` scales the reversed gradient
/// the feature extractor receives from the discriminator term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_disc: f64,
    pub w_coral: f64,
    pub w_mcd: f64,
    pub w_prox: f64,
    pub grl_coefficient: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_disc: 1.0,
            w_coral: 1.0,
            w_mcd: 1.0,
            w_prox: 1e-3,
            grl_coefficient: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_cls,
            self.w_disc,
            self.w_coral,
            self.w_mcd,
            self.w_prox,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.grl_coefficient) {
            return Err(Error::InvalidConfig(
                "grl_coefficient must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Classification-only weights (supervised baseline / no-adaptation runs).
    pub fn classification_only(&self) -> LossWeights {
        LossWeights {
            w_disc: 0.0,
            w_coral: 0.0,
            w_mcd: 0.0,
            ..*self
        }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Domain-discriminator loss: -mean(log p_source) - mean(log(1 - p_target)).
/// The discriminator head minimizes this; the extractor receives the negated
/// gradient scaled by `grl_coefficient` (see `nn::grad`).
pub fn discriminator_loss(d_probs_source: &[f64], d_probs_target: &[f64]) -> Result<f64> {
    if d_probs_source.is_empty() || d_probs_target.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let src: f64 = d_probs_source.iter().map(|&p| clamp_prob(p).ln()).sum();
    let tgt: f64 = d_probs_target
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum();
    Ok(-src / d_probs_source.len() as f64 - tgt / d_probs_target.len() as f64)
}

/// Covariance of mean-centered rows with 1/(n-1) normalization.
pub fn covariance(h: &Array2<f64>) -> Array2<f64> {
    let n = h.nrows();
    let mean = h.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
    let centered = h - &mean;
    centered.t().dot(&centered) / (n as f64 - 1.0)
}

/// Second-order alignment: squared Frobenius distance between the two
/// covariance matrices, scaled by 1/(4 d^2).
pub fn coral_loss(h_source: &Array2<f64>, h_target: &Array2<f64>) -> Result<f64> {
    if h_source.ncols() != h_target.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "coral widths {} vs {}",
            h_source.ncols(),
            h_target.ncols()
        )));
    }
    if h_source.nrows() < 2 || h_target.nrows() < 2 {
        return Err(Error::TooFewSamples(
            "covariance needs at least 2 rows per batch".into(),
        ));
    }
    let d = h_source.ncols() as f64;
    let diff = covariance(h_source) - covariance(h_target);
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / (4.0 * d * d))
}

/// Mean absolute difference between the two classifiers' probabilities on a
/// shared batch of target features.
pub fn discrepancy_loss(probs_a: &[f64], probs_b: &[f64]) -> Result<f64> {
    if probs_a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs_a.len() != probs_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "discrepancy lengths {} vs {}",
            probs_a.len(),
            probs_b.len()
        )));
    }
    let total: f64 = probs_a
        .iter()
        .zip(probs_b)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / probs_a.len() as f64)
}

/// Mean binary cross-entropy over clamped probabilities.
pub fn classification_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probs vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Component values of one joint-loss evaluation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub disc: f64,
    pub coral: f64,
    pub mcd: f64,
    pub prox: f64,
}

/// Weighted combination. The proximal term only participates during target
/// adaptation.
pub fn joint_loss(terms: &LossTerms, weights: &LossWeights, phase: Phase) -> f64 {
    let base = weights.w_cls * terms.cls
        + weights.w_disc * terms.disc
        + weights.w_coral * terms.coral
        + weights.w_mcd * terms.mcd;
    match phase {
        Phase::SourcePretrain => base,
        Phase::TargetAdapt => base + weights.w_prox * terms.prox,
    }
}
