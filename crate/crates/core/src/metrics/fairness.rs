use serde::{Deserialize, Serialize};

use super::{group_fnr, youden_threshold, MetricError};
use crate::datakit::{Attribute, LabelMatrix, Record, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedClass {
    pub class: usize,
    pub name: String,
    pub reason: String,
}

/// Per-class FNR disparity over demographic groups.
///
/// Rows of `per_class_fnr`, `per_class_eo_ratio` and `thresholds_used` follow
/// the requested class subset; `None` marks a value that is undefined for an
/// excluded class (or an absent group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attribute: Option<String>,
    pub groups: Vec<String>,
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub per_class_fnr: Vec<Vec<Option<f64>>>,
    pub per_class_eo_ratio: Vec<Option<f64>>,
    pub thresholds_used: Vec<Option<f64>>,
    pub included_classes: Vec<usize>,
    pub excluded_classes: Vec<ExcludedClass>,
    pub eo_mean: f64,
    pub eo_std: f64,
}

/// Equality of Opportunity over `classes`.
///
/// `group_of[i]` indexes `group_names` for sample `i`; groups with no
/// samples are ignored. Each class uses one pooled Youden threshold; a class
/// is excluded when any present group lacks positives. The ratio is
/// min FNR / max FNR, or 1 when every group has FNR 0.
pub fn equality_of_opportunity(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    group_of: &[usize],
    group_names: &[String],
    classes: &[usize],
) -> Result<FairnessReport, MetricError> {
    if scores.values.dim() != labels.values.dim() || group_of.len() != labels.num_samples() {
        return Err(MetricError::Shape("scores, labels and group assignments disagree in size".into()));
    }
    if let Some(&g) = group_of.iter().find(|&&g| g >= group_names.len()) {
        return Err(MetricError::Groups(format!("group index {g} out of range")));
    }
    let present: Vec<usize> = (0..group_names.len()).filter(|g| group_of.contains(g)).collect();
    if present.len() < 2 {
        return Err(MetricError::Groups(format!("need at least two demographic groups, found {}", present.len())));
    }
    let masks: Vec<Vec<bool>> = (0..group_names.len()).map(|g| group_of.iter().map(|&x| x == g).collect()).collect();

    let mut report = FairnessReport {
        attribute: None,
        groups: group_names.to_vec(),
        classes: classes.to_vec(),
        class_names: classes.iter().map(|&c| labels.class_names[c].clone()).collect(),
        per_class_fnr: Vec::new(),
        per_class_eo_ratio: Vec::new(),
        thresholds_used: Vec::new(),
        included_classes: Vec::new(),
        excluded_classes: Vec::new(),
        eo_mean: 0.0,
        eo_std: 0.0,
    };
    for &c in classes {
        let s = scores.column(c);
        let y = labels.column(c);
        let name = labels.class_names[c].clone();
        let exclude = |report: &mut FairnessReport, reason: String| {
            report.excluded_classes.push(ExcludedClass { class: c, name: name.clone(), reason });
            report.per_class_fnr.push(vec![None; group_names.len()]);
            report.per_class_eo_ratio.push(None);
        };
        let threshold = match youden_threshold(&s, &y) {
            Ok((t, _)) => t,
            Err(e) => {
                report.thresholds_used.push(None);
                exclude(&mut report, e.to_string());
                continue;
            }
        };
        report.thresholds_used.push(Some(threshold));
        let lacking: Vec<&str> =
            present.iter().filter(|&&g| !masks[g].iter().zip(&y).any(|(&m, &l)| m && l)).map(|&g| group_names[g].as_str()).collect();
        if !lacking.is_empty() {
            exclude(&mut report, format!("no positive labels in group(s) {}", lacking.join(", ")));
            continue;
        }
        let mut row = vec![None; group_names.len()];
        for &g in &present {
            row[g] = Some(group_fnr(&s, &y, &masks[g], threshold)?);
        }
        let fnrs: Vec<f64> = row.iter().flatten().copied().collect();
        let max = fnrs.iter().copied().fold(0.0, f64::max);
        let min = fnrs.iter().copied().fold(1.0, f64::min);
        let ratio = if max == 0.0 { 1.0 } else { min / max };
        report.per_class_fnr.push(row);
        report.per_class_eo_ratio.push(Some(ratio));
        report.included_classes.push(c);
    }
    let ratios: Vec<f64> = report.per_class_eo_ratio.iter().flatten().copied().collect();
    if ratios.is_empty() {
        return Err(MetricError::Undefined("no class has positives in every group".into()));
    }
    let m = ratios.len() as f64;
    report.eo_mean = ratios.iter().sum::<f64>() / m;
    report.eo_std = (ratios.iter().map(|r| (r - report.eo_mean).powi(2)).sum::<f64>() / m).sqrt();
    Ok(report)
}

/// [`equality_of_opportunity`] with groups read from manifest records (one
/// record per score row).
pub fn fairness_for_records(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    records: &[Record],
    attribute: Attribute,
    classes: &[usize],
) -> Result<FairnessReport, MetricError> {
    let group_of: Vec<usize> = records.iter().map(|r| r.group_index(attribute)).collect();
    let mut report = equality_of_opportunity(scores, labels, &group_of, &attribute.group_names(), classes)?;
    report.attribute = Some(attribute.as_str().to_string());
    Ok(report)
}
