//! Head/Tail/All branch inference and score combination.
//!
//! Head and Tail class scores are averaged with the All model's score for the
//! same class. The support device class sits in both Head and Tail and takes
//! the mean of all three branches. Averaging is done on probabilities.

use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::{ClassPartition, DataError, ImageSource, Record, ScoreMatrix};
use crate::model::ops::sigmoid;
use crate::model::{ModelError, Network};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("sample mismatch: {0}")]
    Samples(String),
    #[error("partition mismatch: {0}")]
    Partition(String),
    #[error("{branch} branch expects {expected} classes, checkpoint has {found}")]
    ClassCount { branch: Branch, expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid prediction file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Head,
    Tail,
    All,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Head, Branch::Tail, Branch::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Head => "head",
            Branch::Tail => "tail",
            Branch::All => "all",
        }
    }

    pub fn indices(self, partition: &ClassPartition) -> &[usize] {
        match self {
            Branch::Head => &partition.head_indices,
            Branch::Tail => &partition.tail_indices,
            Branch::All => &partition.all_indices,
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head" => Ok(Branch::Head),
            "tail" => Ok(Branch::Tail),
            "all" => Ok(Branch::All),
            other => Err(format!("unknown branch `{other}` (expected head, tail or all)")),
        }
    }
}

/// Probabilities of one branch: N × |class_indices|.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPrediction {
    pub branch: Branch,
    pub class_indices: Vec<usize>,
    pub class_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub scores: Array2<f64>,
}

impl BranchPrediction {
    pub fn num_samples(&self) -> usize {
        self.scores.nrows()
    }

    fn column_of(&self, class: usize) -> Option<usize> {
        self.class_indices.iter().position(|&c| c == class)
    }
}

fn check_branch(pred: &BranchPrediction, partition: &ClassPartition) -> Result<(), EnsembleError> {
    let expected = pred.branch.indices(partition);
    if pred.class_indices != expected {
        return Err(EnsembleError::Partition(format!(
            "{} prediction covers classes {:?}, partition expects {:?}",
            pred.branch, pred.class_indices, expected
        )));
    }
    if pred.scores.ncols() != expected.len() {
        return Err(EnsembleError::Partition(format!("{} prediction has {} score columns", pred.branch, pred.scores.ncols())));
    }
    Ok(())
}

/// Final N×C scores from the three branches (see the module docs for the rule).
pub fn combine(
    all_pred: &BranchPrediction,
    head_pred: &BranchPrediction,
    tail_pred: &BranchPrediction,
    partition: &ClassPartition,
) -> Result<ScoreMatrix, EnsembleError> {
    partition.check().map_err(|e| EnsembleError::Partition(e.to_string()))?;
    for (pred, want) in [(all_pred, Branch::All), (head_pred, Branch::Head), (tail_pred, Branch::Tail)] {
        if pred.branch != want {
            return Err(EnsembleError::Partition(format!("{} prediction passed in the {want} slot", pred.branch)));
        }
        check_branch(pred, partition)?;
    }
    let n = all_pred.num_samples();
    for p in [head_pred, tail_pred] {
        if p.num_samples() != n {
            return Err(EnsembleError::Samples(format!("{} has {} samples, all has {n}", p.branch, p.num_samples())));
        }
        if !p.sample_ids.is_empty() && !all_pred.sample_ids.is_empty() && p.sample_ids != all_pred.sample_ids {
            return Err(EnsembleError::Samples(format!("{} sample ids differ from the all branch", p.branch)));
        }
    }
    let c = partition.num_classes();
    let mut out = all_pred.scores.clone();
    for class in 0..c {
        let head_col = head_pred.column_of(class);
        let tail_col = tail_pred.column_of(class);
        for i in 0..n {
            let a = all_pred.scores[[i, class]];
            out[[i, class]] = match (head_col, tail_col) {
                (Some(h), Some(t)) => {
                    let (h, t) = (head_pred.scores[[i, h]], tail_pred.scores[[i, t]]);
                    let lo = a.min(h).min(t);
                    let hi = a.max(h).max(t);
                    (a + ((h - a) + (t - a)) / 3.0).clamp(lo, hi)
                }
                (Some(h), None) => (a + head_pred.scores[[i, h]]) / 2.0,
                (None, Some(t)) => (a + tail_pred.scores[[i, t]]) / 2.0,
                (None, None) => a,
            };
        }
    }
    Ok(ScoreMatrix::new(out, all_pred.class_names.clone()))
}

/// Sigmoid scores of `network` on `records`, ordered by the branch's classes.
pub fn predict_branch(
    network: &Network,
    records: &[Record],
    images: &ImageSource,
    partition: &ClassPartition,
    branch: Branch,
) -> Result<BranchPrediction, EnsembleError> {
    let expected = branch.indices(partition);
    if network.num_classes() != expected.len() {
        return Err(EnsembleError::ClassCount { branch, expected: expected.len(), found: network.num_classes() });
    }
    if network.class_indices != expected {
        return Err(EnsembleError::Partition(format!(
            "checkpoint classes {:?} differ from the {branch} branch {:?}",
            network.class_indices, expected
        )));
    }
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| -> Result<Vec<f64>, EnsembleError> {
            let img = images.load(&r.image_ref)?;
            Ok(network.logits(&img)?.iter().map(|&z| sigmoid(z)).collect())
        })
        .collect::<Result<_, _>>()?;
    let c = expected.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(BranchPrediction {
        branch,
        class_indices: expected.to_vec(),
        class_names: network.class_names.clone(),
        sample_ids: records.iter().map(|r| r.sample_id.clone()).collect(),
        scores: Array2::from_shape_vec((records.len(), c), flat).expect("one row per record"),
    })
}

/// CSV with `sample_id` and one column per covered class.
pub fn write_branch_csv(pred: &BranchPrediction, path: impl AsRef<Path>) -> Result<(), EnsembleError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(pred.class_names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in pred.sample_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(pred.scores.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a branch CSV; column names are resolved against `class_names`
/// (the global label set).
pub fn read_branch_csv(path: impl AsRef<Path>, branch: Branch, class_names: &[String]) -> Result<BranchPrediction, EnsembleError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("sample_id") {
        return Err(EnsembleError::Format("first column must be `sample_id`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let class_indices = names
        .iter()
        .map(|n| {
            class_names.iter().position(|c| c == n).ok_or_else(|| EnsembleError::Format(format!("unknown class column `{n}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sample_ids = Vec::new();
    let mut flat = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        sample_ids.push(rec.get(0).unwrap_or_default().to_string());
        for (k, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| EnsembleError::Format(format!("row {}: `{field}` in column `{}` is not a number", row + 1, names[k])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(EnsembleError::Format(format!("row {}: score {v} outside [0, 1]", row + 1)));
            }
            flat.push(v);
        }
    }
    let scores = Array2::from_shape_vec((sample_ids.len(), names.len()), flat)
        .map_err(|_| EnsembleError::Format("ragged rows".into()))?;
    Ok(BranchPrediction { branch, class_indices, class_names: names, sample_ids, scores })
}
