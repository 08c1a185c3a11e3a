//! Re-sampling of the training split: cRT-style subsampling towards class
//! balance, and random oversampling of rare classes.
//!
//! Both functions touch only `train` records; validation and test records
//! pass through unchanged and in order.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datakit::{DataError, DatasetManifest, Record, Split};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleKind {
    Crt,
    Ros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleSpec {
    pub kind: ResampleKind,
    pub crt_factor: f64,
    /// `None` uses the median training class count.
    pub ros_threshold: Option<usize>,
    pub seed: u64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self { kind: ResampleKind::Crt, crt_factor: 0.7, ros_threshold: None, seed: 0 }
    }
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.crt_factor > 0.0 && self.crt_factor <= 1.0) {
            return Err(DataError::InvalidSpec(format!("crt_factor {} must lie in (0, 1]", self.crt_factor)));
        }
        if self.ros_threshold == Some(0) {
            return Err(DataError::InvalidSpec("ros_threshold must be at least 1".into()));
        }
        Ok(())
    }

    pub fn apply(&self, manifest: &DatasetManifest) -> Result<DatasetManifest, DataError> {
        self.validate()?;
        match self.kind {
            ResampleKind::Crt => crt_resample(manifest, self.crt_factor, self.seed),
            ResampleKind::Ros => {
                let threshold = match self.ros_threshold {
                    Some(t) => t,
                    None => median_count(&train_counts(manifest)?),
                };
                random_oversample(manifest, threshold, self.seed)
            }
        }
    }
}

fn train_counts(manifest: &DatasetManifest) -> Result<Vec<usize>, DataError> {
    let counts = crate::datakit::class_counts(manifest, Split::Train)?;
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(DataError::NoPositives(manifest.class_names[c].clone()));
    }
    Ok(counts)
}

/// Upper median of the class counts (at least 1).
pub fn median_count(counts: &[usize]) -> usize {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    sorted.get(sorted.len() / 2).copied().unwrap_or(1).max(1)
}

/// max/min ≤ a/b, compared without division.
fn ratio_at_most(counts: &[usize], a: usize, b: usize) -> bool {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    min > 0 && (max as u128) * (b as u128) <= (a as u128) * (min as u128)
}

/// Drops training records in a seeded random order while every class keeps at
/// least `⌈factor · min_count⌉` positives.
///
/// A record is dropped only if it carries at least one label, every class it
/// carries stays at or above the floor, and the max/min count ratio does not
/// rise above the input's. Passes repeat until nothing more can be dropped.
/// Records without positive labels are kept.
pub fn crt_resample(manifest: &DatasetManifest, factor: f64, seed: u64) -> Result<DatasetManifest, DataError> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(DataError::InvalidSpec(format!("crt_factor {factor} must lie in (0, 1]")));
    }
    let mut counts = train_counts(manifest)?;
    let (max0, min0) = (*counts.iter().max().expect("classes"), *counts.iter().min().expect("classes"));
    let floor = (factor * min0 as f64 - 1e-9).ceil() as usize;

    let mut order: Vec<usize> = (0..manifest.records.len()).filter(|&i| manifest.records[i].split == Split::Train).collect();
    order.shuffle(&mut seeded(seed));
    let mut kept = vec![true; manifest.records.len()];
    loop {
        let mut changed = false;
        for &i in &order {
            let labels = &manifest.records[i].labels;
            if !kept[i] || labels.iter().all(|&v| v == 0) {
                continue;
            }
            if labels.iter().zip(&counts).any(|(&v, &n)| v == 1 && n <= floor) {
                continue;
            }
            let trial: Vec<usize> = counts.iter().zip(labels).map(|(&n, &v)| n - v as usize).collect();
            if !ratio_at_most(&trial, max0, min0) {
                continue;
            }
            counts = trial;
            kept[i] = false;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let records = manifest.records.iter().zip(&kept).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
    Ok(DatasetManifest { class_names: manifest.class_names.clone(), records })
}

/// Duplicates uniformly drawn positives of each class below `threshold`
/// until it reaches the threshold.
///
/// Classes are visited in index order with live counts, so duplicates made for
/// one class count towards every label they carry. A duplicate of `x` gets the
/// id `x__dup<n>` and `provenance = x`.
pub fn random_oversample(manifest: &DatasetManifest, threshold: usize, seed: u64) -> Result<DatasetManifest, DataError> {
    if threshold == 0 {
        return Err(DataError::InvalidSpec("ros_threshold must be at least 1".into()));
    }
    let mut counts = train_counts(manifest)?;
    let mut rng = seeded(seed);
    let mut ids: HashSet<String> = manifest.records.iter().map(|r| r.sample_id.clone()).collect();
    let mut out = manifest.records.clone();
    for c in 0..counts.len() {
        if counts[c] >= threshold {
            continue;
        }
        let pool: Vec<&Record> = manifest.records.iter().filter(|r| r.split == Split::Train && r.labels[c] == 1).collect();
        while counts[c] < threshold {
            let src = pool[rng.random_range(0..pool.len())];
            let mut n = 1;
            let id = loop {
                let candidate = format!("{}__dup{n}", src.sample_id);
                if !ids.contains(&candidate) {
                    break candidate;
                }
                n += 1;
            };
            ids.insert(id.clone());
            for (k, &v) in src.labels.iter().enumerate() {
                counts[k] += v as usize;
            }
            out.push(Record { sample_id: id, provenance: Some(src.sample_id.clone()), ..src.clone() });
        }
    }
    Ok(DatasetManifest { class_names: manifest.class_names.clone(), records: out })
}
