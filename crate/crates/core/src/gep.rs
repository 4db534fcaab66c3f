//! Thresholding generalization-error predictor.
//!
//! A sample counts as "predicted correct" when its score is `>= tau`. The
//! threshold is calibrated so that the fraction of validation samples above
//! it matches the validation accuracy of the scored predictor; the same
//! fraction on a target set is the predicted target accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GepError {
    #[error("scores are empty")]
    EmptyScores,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("accuracy {0} is outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
}

/// Validation scores plus the validation accuracy they should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInput<'a, T> {
    pub val_scores: &'a [T],
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Threshold<T> {
    pub tau: T,
    pub achieved_val_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GepEstimate {
    pub predicted_accuracy: f64,
    pub tau: f64,
    pub method: String,
    pub target: String,
}

fn check_scores<T: Scalar>(scores: &[T]) -> Result<(), GepError> {
    if scores.is_empty() {
        return Err(GepError::EmptyScores);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(GepError::NonFiniteScore { index });
    }
    Ok(())
}

/// Exact minimizer of `|acc_val - #{s_i >= tau} / n|`.
///
/// Candidates are the distinct scores in ascending order followed by
/// `max + 1`; together they realize every achievable count. The first
/// candidate reaching the minimum wins.
pub fn calibrate_threshold<T: Scalar>(input: CalibrationInput<'_, T>) -> Result<Threshold<T>, GepError> {
    let scores = input.val_scores;
    check_scores(scores)?;
    let acc = input.val_accuracy;
    if !(0.0..=1.0).contains(&acc) {
        return Err(GepError::AccuracyOutOfRange(acc));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let inv_n = 1.0 / n as f64;
    let mut best = Threshold {
        tau: sorted[0],
        achieved_val_error: (acc - 1.0).abs(),
    };
    // scan distinct values; `i` scores lie strictly below sorted[i]
    let mut i = 0;
    while i < n {
        let candidate = sorted[i];
        let count_at_or_above = n - i;
        let err = (acc - count_at_or_above as f64 * inv_n).abs();
        if err < best.achieved_val_error {
            best = Threshold {
                tau: candidate,
                achieved_val_error: err,
            };
        }
        while i < n && sorted[i] == candidate {
            i += 1;
        }
    }
    if acc < best.achieved_val_error {
        best = Threshold {
            tau: sorted[n - 1] + T::one(),
            achieved_val_error: acc,
        };
    }
    Ok(best)
}

/// `#{s_i >= tau} / n`.
pub fn predicted_fraction<T: Scalar>(scores: &[T], tau: T) -> Result<f64, GepError> {
    check_scores(scores)?;
    let above = scores.iter().filter(|&&s| s >= tau).count();
    Ok(above as f64 / scores.len() as f64)
}

/// Predicted accuracy of a target score set under `threshold`.
pub fn predict_accuracy<T: Scalar>(
    scores: &[T],
    threshold: &Threshold<T>,
    method: &str,
    target: &str,
) -> Result<GepEstimate, GepError> {
    Ok(GepEstimate {
        predicted_accuracy: predicted_fraction(scores, threshold.tau)?,
        tau: threshold.tau.as_f64(),
        method: method.to_owned(),
        target: target.to_owned(),
    })
}

/// Fraction of positions where prediction equals label.
pub fn true_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, GepError> {
    if predictions.len() != labels.len() {
        return Err(GepError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(GepError::EmptyScores);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean of `|predicted_i - truth_i|`.
pub fn mae(estimates: &[GepEstimate], truths: &[f64]) -> Result<f64, GepError> {
    if estimates.len() != truths.len() {
        return Err(GepError::LengthMismatch {
            left: estimates.len(),
            right: truths.len(),
        });
    }
    if estimates.is_empty() {
        return Err(GepError::EmptyScores);
    }
    let total: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e.predicted_accuracy - t).abs())
        .sum();
    Ok(total / truths.len() as f64)
}
