//! Classification metrics for model evaluation.
//!
//! Per-class precision, recall, and F1 come from the confusion counts of the
//! argmax prediction; a class with no predicted (or no actual) positives
//! reports 0 rather than NaN. The ROC-AUC is micro-averaged one-vs-rest: all
//! `n * K` (score, is-positive) pairs are pooled into a single binary ROC
//! curve integrated with the trapezoidal rule. Tied scores are collapsed into
//! one sweep step, which also makes the result independent of row order.

use serde::Serialize;

/// Precision, recall, and F1 for one class.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evaluation summary for a model on a labeled dataset.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of rows whose argmax prediction matches the label.
    pub accuracy: f64,
    /// Indexed by class id.
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean of per-class F1 over all classes.
    pub macro_f1: f64,
    /// Unweighted mean of per-class precision over all classes.
    pub macro_precision: f64,
    /// Micro-averaged one-vs-rest ROC-AUC over the pooled score pairs.
    pub auc_micro_ovr: f64,
    pub sample_count: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Builds per-class and macro metrics from predictions and labels.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> (Vec<ClassMetrics>, f64, f64, f64) {
    debug_assert_eq!(predictions.len(), labels.len());
    let n = labels.len();
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fne[y] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|k| {
            let precision = ratio(tp[k] as f64, (tp[k] + fp[k]) as f64);
            let recall = ratio(tp[k] as f64, (tp[k] + fne[k]) as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let macro_precision =
        per_class.iter().map(|m| m.precision).sum::<f64>() / num_classes as f64;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / num_classes as f64;
    let accuracy = ratio(correct as f64, n as f64);
    (per_class, macro_f1, macro_precision, accuracy)
}

/// Micro-averaged one-vs-rest ROC-AUC.
///
/// `scores` is row-major `n x num_classes`; row `i` holds the predicted
/// class probabilities for sample `i` with true label `labels[i]`.
pub fn auc_micro_ovr(scores: &[f64], labels: &[usize], num_classes: usize) -> f64 {
    let n = labels.len();
    debug_assert_eq!(scores.len(), n * num_classes);
    // Pool every (score, is-positive) pair across samples and classes.
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n * num_classes);
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..num_classes {
            pairs.push((scores[i * num_classes + k], k == y));
        }
    }
    let positives = n as f64;
    let negatives = (n * (num_classes - 1)) as f64;
    if positives == 0.0 || negatives == 0.0 {
        return 0.0;
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    // Sweep thresholds from high to low, advancing over groups of tied
    // scores so the curve is well-defined under ties.
    let mut auc = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_tpr = 0.0;
    let mut prev_fpr = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let tpr = tp / positives;
        let fpr = fp / negatives;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    auc
}
