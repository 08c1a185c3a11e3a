//! Ranking and threshold metrics for multi-label evaluation, plus fairness
//! (per-group false negative rates and Equality of Opportunity).
//!
//! All curves sweep the unique observed scores in descending order and
//! classify a sample as positive when `score >= threshold`, so tied scores
//! always enter together.

mod fairness;
mod report;

pub use fairness::{equality_of_opportunity, fairness_for_records, ExcludedClass, FairnessReport};
pub use report::{
    build_report, curve_rows, render_ap_bars, render_roc_grid, write_curves, write_report, ClassMetrics, CurveRow,
    EvalReport, F1Threshold, ReportOptions,
};

use thiserror::Error;

use crate::datakit::{LabelMatrix, ScoreMatrix};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("groups: {0}")]
    Groups(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Starts at +inf for the (0, 0) corner.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

/// Cumulative (threshold, tp, fp) at each unique score, descending.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, usize, usize)>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricError::Undefined(format!("score {bad} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    Ok(out)
}

fn count_positives(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve, MetricError> {
    let steps = sweep(scores, labels)?;
    let (pos, _) = count_positives(labels);
    if pos == 0 {
        return Err(MetricError::Undefined("precision-recall needs at least one positive".into()));
    }
    let mut curve = PrCurve { thresholds: vec![], precision: vec![], recall: vec![] };
    for (t, tp, fp) in steps {
        curve.thresholds.push(t);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(tp as f64 / pos as f64);
    }
    Ok(curve)
}

/// Step-wise area under the precision-recall curve: Σ (R_k − R_{k−1})·P_k.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let curve = pr_curve(scores, labels)?;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (p, r) in curve.precision.iter().zip(&curve.recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(ap)
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricError> {
    let steps = sweep(scores, labels)?;
    let (pos, neg) = count_positives(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("ROC needs both positive and negative labels".into()));
    }
    let mut curve = RocCurve { thresholds: vec![f64::INFINITY], tpr: vec![0.0], fpr: vec![0.0] };
    for (t, tp, fp) in steps {
        curve.thresholds.push(t);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.fpr.push(fp as f64 / neg as f64);
    }
    Ok(curve)
}

/// Trapezoidal area under the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64), MetricError> {
    let curve = roc_curve(scores, labels)?;
    let auc = curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum();
    Ok((curve, auc))
}

/// Threshold maximising J = TPR − FPR over the unique observed scores; ties go
/// to the larger threshold. Returns `(threshold, J)`.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), MetricError> {
    let steps = sweep(scores, labels)?;
    let (pos, neg) = count_positives(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("Youden index needs both positive and negative labels".into()));
    }
    // compare J·pos·neg as integers so ties are exact
    let (mut best_t, mut best) = (f64::NAN, i128::MIN);
    for (t, tp, fp) in steps {
        let j = tp as i128 * neg as i128 - fp as i128 * pos as i128;
        if j > best {
            best = j;
            best_t = t;
        }
    }
    Ok((best_t, best as f64 / (pos * neg) as f64))
}

/// Fraction of the group's positives scored below `threshold`.
pub fn group_fnr(scores: &[f64], labels: &[bool], group_mask: &[bool], threshold: f64) -> Result<f64, MetricError> {
    if scores.len() != labels.len() || scores.len() != group_mask.len() {
        return Err(MetricError::Shape("scores, labels and group mask must have equal length".into()));
    }
    let (mut pos, mut missed) = (0usize, 0usize);
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(group_mask) {
        if g && y {
            pos += 1;
            if s < threshold {
                missed += 1;
            }
        }
    }
    if pos == 0 {
        return Err(MetricError::Undefined("group has no positive labels".into()));
    }
    Ok(missed as f64 / pos as f64)
}

fn check_matrices(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<(), MetricError> {
    if scores.values.dim() != labels.values.dim() {
        return Err(MetricError::Shape(format!("scores {:?} vs labels {:?}", scores.values.dim(), labels.values.dim())));
    }
    Ok(())
}

/// Unweighted mean of per-class AP over `classes` (column indices).
pub fn mean_ap(scores: &ScoreMatrix, labels: &LabelMatrix, classes: &[usize]) -> Result<(f64, Vec<f64>), MetricError> {
    check_matrices(scores, labels)?;
    if classes.is_empty() {
        return Err(MetricError::Undefined("empty class subset".into()));
    }
    let per_class = classes
        .iter()
        .map(|&c| {
            average_precision(&scores.column(c), &labels.column(c))
                .map_err(|e| MetricError::Undefined(format!("class `{}`: {e}", labels.class_names[c])))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((per_class.iter().sum::<f64>() / per_class.len() as f64, per_class))
}

/// F1 = 2TP / (2TP + FP + FN) per class at `score >= threshold`, 0 when the
/// denominator vanishes; returns the unweighted mean and per-class values.
pub fn macro_f1(scores: &ScoreMatrix, labels: &LabelMatrix, thresholds: &[f64]) -> Result<(f64, Vec<f64>), MetricError> {
    check_matrices(scores, labels)?;
    if thresholds.len() != scores.num_classes() {
        return Err(MetricError::Shape(format!("{} thresholds for {} classes", thresholds.len(), scores.num_classes())));
    }
    let per_class: Vec<f64> = (0..scores.num_classes())
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&s, &y) in scores.values.column(c).iter().zip(labels.values.column(c)) {
                match (s >= thresholds[c], y == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok((mean, per_class))
}
