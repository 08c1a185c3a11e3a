//! Dataset manifests, class statistics and the Head/Tail/All partition.

mod manifest;
mod matrix;
mod partition;
mod store;
mod synth;

pub use manifest::{load_manifest, load_manifest_strict, write_manifest};
pub use matrix::{LabelMatrix, ScoreMatrix};
pub use partition::{default_head_size, partition_classes, ClassPartition};
pub use store::{ImageSource, ImageStore};
pub use synth::{generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// The 19 findings of the pruned long-tailed MIMIC-CXR label set, ordered by
/// approximate training-split prevalence (most frequent first).
pub const CXR_CLASSES: [&str; 19] = [
    "Support Devices",
    "Pleural Effusion",
    "Lung Opacity",
    "Atelectasis",
    "Cardiomegaly",
    "Edema",
    "Pneumonia",
    "Consolidation",
    "Enlarged Cardiomediastinum",
    "Pneumothorax",
    "Fracture",
    "Calcification of the Aorta",
    "Tortuous Aorta",
    "Emphysema",
    "Lung Lesion",
    "Subcutaneous Emphysema",
    "Pleural Other",
    "Pneumomediastinum",
    "Pneumoperitoneum",
];

pub const SUPPORT_DEVICE: &str = "Support Devices";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("duplicate sample_id `{0}`")]
    DuplicateId(String),
    #[error("split `{0}` has no records")]
    EmptySplit(Split),
    #[error("class `{0}` has no positive records")]
    NoPositives(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid resampling spec: {0}")]
    InvalidSpec(String),
    #[error("class `{class}` would receive zero positives (expected {expected:.3})")]
    InfeasibleClass { class: String, expected: f64 },
    #[error("partition error: {0}")]
    Partition(String),
    #[error("image store: {0}")]
    Store(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validate" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Hispanic,
    Asian,
    Other,
}

impl Race {
    pub const ALL: [Race; 5] = [Race::White, Race::Black, Race::Hispanic, Race::Asian, Race::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Race::White => "White",
            Race::Black => "Black",
            Race::Hispanic => "Hispanic",
            Race::Asian => "Asian",
            Race::Other => "Other",
        }
    }

    fn parse(s: &str) -> Option<Race> {
        match s.trim().to_ascii_lowercase().as_str() {
            "white" => Some(Race::White),
            "black" => Some(Race::Black),
            "hispanic" => Some(Race::Hispanic),
            "asian" => Some(Race::Asian),
            "other" => Some(Race::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }

    fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Some(Gender::Male),
            "female" | "f" => Some(Gender::Female),
            _ => None,
        }
    }
}

/// Demographic attribute used to group samples for fairness evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Race,
    Gender,
}

impl Attribute {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Race => "race",
            Attribute::Gender => "gender",
        }
    }

    pub fn group_names(self) -> Vec<String> {
        match self {
            Attribute::Race => Race::ALL.iter().map(|r| r.as_str().to_string()).collect(),
            Attribute::Gender => Gender::ALL.iter().map(|g| g.as_str().to_string()).collect(),
        }
    }
}

impl FromStr for Attribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "race" => Ok(Attribute::Race),
            "gender" | "sex" => Ok(Attribute::Gender),
            other => Err(format!("unknown demographic attribute `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub sample_id: String,
    pub image_ref: String,
    pub split: Split,
    pub race: Race,
    pub gender: Gender,
    pub labels: Vec<u8>,
    /// Source sample of an oversampled duplicate.
    pub provenance: Option<String>,
}

impl Record {
    pub fn group_index(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Race => self.race as usize,
            Attribute::Gender => self.gender as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, records: Vec<Record>) -> Result<Self, DataError> {
        let manifest = Self { class_names, records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let c = self.num_classes();
        let mut seen = std::collections::HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if r.labels.len() != c {
                return Err(DataError::Parse {
                    row: i + 1,
                    message: format!("expected {c} labels, found {}", r.labels.len()),
                });
            }
            if let Some(bad) = r.labels.iter().find(|&&v| v > 1) {
                return Err(DataError::Parse { row: i + 1, message: format!("label {bad} is not binary") });
            }
            if !seen.insert(r.sample_id.as_str()) {
                return Err(DataError::DuplicateId(r.sample_id.clone()));
            }
        }
        Ok(())
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            class_names: self.class_names.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        LabelMatrix::from_records(&self.records, self.class_names.clone())
    }

    /// Positive counts over every record regardless of split.
    pub fn total_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for r in &self.records {
            for (c, &v) in r.labels.iter().enumerate() {
                counts[c] += v as usize;
            }
        }
        counts
    }
}

/// Per-class positive counts within one split.
pub fn class_counts(manifest: &DatasetManifest, split: Split) -> Result<Vec<usize>, DataError> {
    let mut counts = vec![0usize; manifest.num_classes()];
    let mut any = false;
    for r in manifest.records.iter().filter(|r| r.split == split) {
        any = true;
        for (c, &v) in r.labels.iter().enumerate() {
            counts[c] += v as usize;
        }
    }
    if !any {
        return Err(DataError::EmptySplit(split));
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, split: Split, labels: &[u8]) -> Record {
        Record {
            sample_id: id.into(),
            image_ref: format!("store:{id}"),
            split,
            race: Race::White,
            gender: Gender::Female,
            labels: labels.to_vec(),
            provenance: None,
        }
    }

    #[test]
    fn counts_two_records() {
        let m = DatasetManifest::new(
            vec!["a".into(), "b".into()],
            vec![rec("1", Split::Train, &[1, 0]), rec("2", Split::Train, &[1, 1])],
        )
        .unwrap();
        assert_eq!(class_counts(&m, Split::Train).unwrap(), vec![2, 1]);
    }

    #[test]
    fn counts_all_zero_labels() {
        let m = DatasetManifest::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![rec("1", Split::Train, &[0, 0, 0]), rec("2", Split::Train, &[0, 0, 0])],
        )
        .unwrap();
        assert_eq!(class_counts(&m, Split::Train).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn counts_empty_split_errors() {
        let m = DatasetManifest::new(vec!["a".into()], vec![rec("1", Split::Train, &[1])]).unwrap();
        assert!(matches!(class_counts(&m, Split::Test), Err(DataError::EmptySplit(Split::Test))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DatasetManifest::new(
            vec!["a".into()],
            vec![rec("x", Split::Train, &[1]), rec("x", Split::Val, &[0])],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(id) if id == "x"));
    }
}
