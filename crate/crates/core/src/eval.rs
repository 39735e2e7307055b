//! Evaluation metrics: confusion-matrix statistics and the ROC curve.
//!
//! Everything here is a pure function over `(scores, labels)` pairs, where
//! scores are probabilities in `[0, 1]` and labels are exactly 0 or 1. The
//! threshold sweep groups tied scores, which makes the trapezoidal AUC equal
//! the Mann-Whitney pairwise-concordance statistic (ties counted ½) exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts at a fixed decision threshold. A sample is predicted positive when
/// its score reaches the threshold (`score >= threshold`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positive: u64,
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }
}

/// The four headline metrics. Precision is undefined (None) when nothing was
/// predicted positive, recall when no positives exist; F1 falls back to 0
/// when either side is undefined or both are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
}

fn validate_pairs(scores: &[f32], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InsufficientData("no samples to evaluate".into()));
    }
    for (i, &s) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Value(format!(
                "score[{i}] = {s} is outside [0, 1]"
            )));
        }
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Value(format!(
            "label[{i}] = {} is not in {{0, 1}}",
            labels[i]
        )));
    }
    Ok(())
}

/// Tallies the confusion matrix at `threshold` (default 0.5 upstream).
pub fn confusion(scores: &[f32], labels: &[u8], threshold: f32) -> Result<ConfusionMatrix> {
    validate_pairs(scores, labels)?;
    if !threshold.is_finite() {
        return Err(Error::Value(format!("threshold {threshold} is not finite")));
    }
    let mut cm = ConfusionMatrix {
        true_positive: 0,
        true_negative: 0,
        false_positive: 0,
        false_negative: 0,
    };
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.true_positive += 1,
            (true, false) => cm.false_positive += 1,
            (false, true) => cm.false_negative += 1,
            (false, false) => cm.true_negative += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, precision, recall, and F1 from a confusion matrix:
/// A = (TP+TN)/N, P = TP/(TP+FP), R = TP/(TP+FN), F = 2PR/(P+R).
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InsufficientData("empty confusion matrix".into()));
    }
    let accuracy = (cm.true_positive + cm.true_negative) as f64 / total as f64;
    let predicted_pos = cm.true_positive + cm.false_positive;
    let actual_pos = cm.true_positive + cm.false_negative;
    let precision =
        (predicted_pos > 0).then(|| cm.true_positive as f64 / predicted_pos as f64);
    let recall = (actual_pos > 0).then(|| cm.true_positive as f64 / actual_pos as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    };
    Ok(Metrics { accuracy, precision, recall, f1 })
}

/// One operating point of the ROC curve. The threshold is the lowest score
/// still predicted positive at this point; the (0, 0) anchor carries +∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over every distinct score threshold plus its AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps thresholds from high to low, grouping tied scores into one step.
///
/// TPR = TP/(TP+FN) and FPR = FP/(FP+TN) — the false positive rate is
/// 1 − specificity, the fraction of actual negatives predicted positive.
/// AUC is the trapezoidal area under the stepwise curve, which for grouped
/// ties equals the pairwise concordance probability with ties counted ½.
pub fn roc_auc(scores: &[f32], labels: &[u8]) -> Result<RocCurve> {
    validate_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "AUC undefined: labels hold {pos} positives and {neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("validated finite"));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut auc2 = 0.0f64; // twice the area, accumulated per trapezoid
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        // Consume every sample tied at this score as a single step.
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        let prev_tpr = tp as f64 / pos as f64;
        tp += dtp;
        fp += dfp;
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auc2 += (dfp as f64 / neg as f64) * (prev_tpr + tpr);
        points.push(RocPoint { threshold: score as f64, fpr, tpr });
    }
    Ok(RocCurve { points, auc: auc2 / 2.0 })
}

impl RocCurve {
    /// The curve as CSV `threshold,fpr,tpr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}
