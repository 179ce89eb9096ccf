//! Pointwise detection metrics. "Positive" always means a point detected
//! as anomalous.

use crate::error::{Error, Result};

/// Pointwise confusion counts between a prediction and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

/// The four pointwise metrics plus bookkeeping used by the benchmark
/// harness (method name, point count, per-phase wall-clock timings).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub points: u64,
    /// FN / (FN + TN); 0 when the denominator is 0.
    pub false_omission_rate: f64,
    /// FP / (FP + TN); 0 when the denominator is 0.
    pub false_positive_rate: f64,
    /// Mean of sensitivity TP/(TP+FN) and specificity TN/(TN+FP); a term
    /// whose class is absent counts as 1 (that class was trivially handled).
    pub balanced_accuracy: f64,
    /// 2TP / (2TP + FP + FN); 1 when no positives exist in either vector.
    pub dice: f64,
    /// (phase name, seconds) pairs, filled by callers that time phases.
    pub timings: Vec<(String, f64)>,
}

/// Tallies confusion counts; errors when lengths differ.
pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

fn ratio_or(num: u64, den: u64, when_empty: f64) -> f64 {
    if den == 0 {
        when_empty
    } else {
        num as f64 / den as f64
    }
}

/// Computes the four metrics from confusion counts.
pub fn metrics(c: &ConfusionCounts) -> MetricsReport {
    let sensitivity = ratio_or(c.true_pos, c.true_pos + c.false_neg, 1.0);
    let specificity = ratio_or(c.true_neg, c.true_neg + c.false_pos, 1.0);
    let dice_den = 2 * c.true_pos + c.false_pos + c.false_neg;
    MetricsReport {
        method: String::new(),
        points: c.total(),
        false_omission_rate: ratio_or(c.false_neg, c.false_neg + c.true_neg, 0.0),
        false_positive_rate: ratio_or(c.false_pos, c.false_pos + c.true_neg, 0.0),
        balanced_accuracy: 0.5 * (sensitivity + specificity),
        dice: ratio_or(2 * c.true_pos, dice_den, 1.0),
        timings: Vec::new(),
    }
}
