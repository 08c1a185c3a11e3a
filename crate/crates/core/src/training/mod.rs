//! Branch training with the Lion optimizer, checkpoints and classifier
//! re-training (cRT).
//!
//! Each step augments the batch with per-sample seeds, runs the network and
//! the loss, and applies one Lion update. Per-sample gradients are summed in
//! fixed-size chunks and the chunk sums are reduced in order, so results do
//! not depend on the number of worker threads.

mod checkpoint;
mod lion;

pub use checkpoint::{load_backbone, Checkpoint, EpochMetrics, METRICS_FILE, MODEL_FILE, OPTIMIZER_DIR, WEIGHTS_DIR};
pub use lion::{lion_step, lion_update, LionHyper, OptimizerState};

use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_policy, default_policy, AugmentPolicy};
use crate::datakit::{ClassPartition, DataError, DatasetManifest, ImageSource, LabelMatrix, Record, ScoreMatrix, Split};
use crate::ensemble::Branch;
use crate::losses::{compute_pos_weights, LossConfig, LossError, LossKind};
use crate::metrics::{average_precision, MetricError};
use crate::model::ops::sigmoid;
use crate::model::{BackboneKind, ModelError, Network, NetworkConfig, Parameters};
use crate::rng::{derive_seed, sample_seed, seeded};

/// Samples per gradient chunk.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {loss} loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Global class indices; overrides the branch's partition subset.
    pub class_subset: Option<Vec<usize>>,
    pub augment: bool,
    /// `None` uses [`default_policy`].
    pub augment_policy: Option<AugmentPolicy>,
    pub network: NetworkConfig,
    /// Weight-manifest directory for an external backbone.
    pub backbone_weights: Option<PathBuf>,
    pub train_backbone: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-6,
            weight_decay: 5e-5,
            batch_size: 32,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.99,
            loss: LossConfig::default(),
            seed: 0,
            class_subset: None,
            augment: true,
            augment_policy: None,
            network: NetworkConfig::default(),
            backbone_weights: None,
            train_backbone: true,
            max_steps: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        self.loss.validate()?;
        if self.network.backbone.kind == BackboneKind::ExternalPretrained && self.backbone_weights.is_none() {
            return bad("an external backbone needs backbone_weights".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> LionHyper {
        LionHyper { lr: self.learning_rate, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2 }
    }

    /// Sets a dotted key (`loss.gamma`, `network.embed_dim`, ...) from a
    /// string; values that parse as JSON are used as such, anything else as a
    /// string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<TrainConfig, TrainError> {
        let mut root = serde_json::to_value(self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| TrainError::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        serde_json::from_value(root).map_err(|e| TrainError::Config(format!("`{key}={value}`: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn policy(&self) -> AugmentPolicy {
        self.augment_policy.clone().unwrap_or_else(default_policy)
    }
}

/// Result of a training run: the best-validation checkpoint and the network
/// after the last step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_network: Network,
}

/// Builds a fresh network for `branch` (or `config.class_subset`) and trains it.
pub fn train(
    manifest: &DatasetManifest,
    images: &ImageSource,
    partition: &ClassPartition,
    branch: Branch,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let indices = config.class_subset.clone().unwrap_or_else(|| branch.indices(partition).to_vec());
    if indices.is_empty() {
        return Err(TrainError::Config("branch class subset is empty".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= manifest.num_classes()) {
        return Err(TrainError::Config(format!("class index {bad} out of range")));
    }
    let names = indices.iter().map(|&i| manifest.class_names[i].clone()).collect();
    let init_seed = derive_seed(config.seed, &[b"init"]);
    let network = match &config.backbone_weights {
        Some(dir) => {
            let backbone = load_backbone(dir, config.network.backbone.clone())?;
            Network::with_backbone(config.network.clone(), backbone, indices, names, init_seed)?
        }
        None => Network::new(config.network.clone(), indices, names, init_seed)?,
    };
    train_network(network, manifest, images, branch, config)
}

/// Loss settings restricted to the network's classes, with positive
/// weights computed from the training split when absent.
fn prepare_loss(config: &LossConfig, train: &[Record], class_names: &[String], indices: &[usize]) -> Result<LossConfig, TrainError> {
    let mut loss = config.restrict(indices)?;
    if loss.kind == LossKind::WeightedBce && loss.pos_weights.is_none() {
        let labels = LabelMatrix::from_records(train, class_names.to_vec()).select_classes(indices);
        loss.pos_weights = Some(compute_pos_weights(&labels)?);
    }
    Ok(loss)
}

/// Logits for `records` (no augmentation), one row per record.
pub fn infer_logits(network: &Network, records: &[Record], images: &ImageSource) -> Result<Array2<f64>, TrainError> {
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| -> Result<Vec<f64>, TrainError> { Ok(network.logits(&images.load(&r.image_ref)?)?.to_vec()) })
        .collect::<Result<_, _>>()?;
    let c = network.num_classes();
    Ok(Array2::from_shape_vec((records.len(), c), rows.into_iter().flatten().collect()).expect("row per record"))
}

fn branch_labels(records: &[Record], indices: &[usize]) -> Array2<u8> {
    Array2::from_shape_fn((records.len(), indices.len()), |(i, k)| records[i].labels[indices[k]])
}

/// Mean AP over branch classes that have at least one positive.
fn map_over_defined(scores: &Array2<f64>, labels: &Array2<u8>) -> Option<f64> {
    let aps: Vec<f64> = (0..labels.ncols())
        .filter_map(|k| {
            let y: Vec<bool> = labels.column(k).iter().map(|&v| v == 1).collect();
            average_precision(&scores.column(k).to_vec(), &y).ok()
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Sum of per-sample losses (each the mean over classes) and the gradient of
/// `sum / batch_len`, accumulated into a zeroed copy of the network.
fn batch_gradient(
    network: &Network,
    batch: &[&Record],
    images: &ImageSource,
    loss: &LossConfig,
    config: &TrainConfig,
    policy: &AugmentPolicy,
    epoch: usize,
) -> Result<(f64, Network), TrainError> {
    let b = batch.len() as f64;
    let chunks: Vec<(f64, Network)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, Network), TrainError> {
            let mut grads = network.zeros_like();
            let mut total = 0.0;
            for r in chunk {
                let mut img = images.load(&r.image_ref)?;
                if config.augment {
                    img = apply_policy(&img, policy, sample_seed(config.seed, epoch, &r.sample_id));
                }
                let (logits, cache) = network.forward(&img)?;
                let labels = Array2::from_shape_fn((1, network.num_classes()), |(_, k)| r.labels[network.class_indices[k]]);
                let (l, g) = loss.evaluate(&logits.insert_axis(Axis(0)), &labels)?;
                total += l;
                let d = g.index_axis(Axis(0), 0).mapv(|v| v / b);
                network.backward(&cache, &d, &mut grads, config.train_backbone);
            }
            Ok((total, grads))
        })
        .collect::<Result<_, _>>()?;
    let mut iter = chunks.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Trains `network` on its own classes. With `train_backbone = false` the
/// backbone is frozen.
pub fn train_network(
    network: Network,
    manifest: &DatasetManifest,
    images: &ImageSource,
    branch: Branch,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run(network, manifest, images, branch, config))
}

fn run(
    mut network: Network,
    manifest: &DatasetManifest,
    images: &ImageSource,
    branch: Branch,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let train_set = manifest.split(Split::Train).records;
    if train_set.is_empty() {
        return Err(DataError::EmptySplit(Split::Train).into());
    }
    let val_set = manifest.split(Split::Val).records;
    let indices = network.class_indices.clone();
    let loss = prepare_loss(&config.loss, &train_set, &manifest.class_names, &indices)?;
    let policy = config.policy();
    let hp = config.hyper();
    let val_labels = branch_labels(&val_set, &indices);

    let mut state = OptimizerState::new(&network);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(Checkpoint, Option<f64>)> = None;
    let mut steps = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<&Record> = train_set.iter().collect();
        order.shuffle(&mut seeded(derive_seed(config.seed, &[b"shuffle", &(epoch as u64).to_le_bytes()])));
        let (mut epoch_loss, mut seen) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let (total, grads) = batch_gradient(&network, batch, images, &loss, config, &policy, epoch)?;
            if !total.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1, loss: loss.kind.as_str() });
            }
            lion_update(&mut network, &grads, &mut state, &hp, |name| {
                !config.train_backbone && name.starts_with("backbone.")
            })?;
            epoch_loss += total;
            seen += batch.len();
            steps += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let (val_loss, val_map) = if val_set.is_empty() {
            (None, None)
        } else {
            let logits = infer_logits(&network, &val_set, images)?;
            let (l, _) = loss.evaluate(&logits, &val_labels)?;
            (Some(l), map_over_defined(&logits.mapv(sigmoid), &val_labels))
        };
        let metrics = EpochMetrics { epoch, train_loss: epoch_loss / seen as f64, val_loss, val_map };
        history.push(metrics.clone());
        let better = match (&best, val_map) {
            (None, _) => true,
            (Some((_, prev)), Some(m)) => prev.is_none_or(|p| m > p),
            (Some((_, prev)), None) => prev.is_none(),
        };
        if better {
            let cp = Checkpoint {
                network: network.clone(),
                optimizer: state.clone(),
                branch,
                epoch,
                config: config.clone(),
                history: Vec::new(),
            };
            best = Some((cp, val_map));
        }
        if config.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let (mut checkpoint, _) = best.ok_or_else(|| TrainError::Config("no training step was run (epochs = 0?)".into()))?;
    checkpoint.history = history;
    Ok(TrainOutcome { checkpoint, final_network: network })
}

/// Mean loss of `network` over a record set, without augmentation.
pub fn evaluate_loss(network: &Network, records: &[Record], images: &ImageSource, loss: &LossConfig) -> Result<f64, TrainError> {
    let logits = infer_logits(network, records, images)?;
    let labels = branch_labels(records, &network.class_indices);
    Ok(loss.evaluate(&logits, &labels)?.0)
}

/// Sigmoid scores over the network's classes.
pub fn predict_scores(network: &Network, records: &[Record], images: &ImageSource) -> Result<ScoreMatrix, TrainError> {
    let logits = infer_logits(network, records, images)?;
    Ok(ScoreMatrix::new(logits.mapv(sigmoid), network.class_names.clone()))
}

/// Second cRT stage: for each re-sampled manifest, keep the checkpoint's
/// backbone frozen, re-initialise the decoder and retrain it.
pub fn crt_retrain(
    checkpoint: &Checkpoint,
    manifests: &[DatasetManifest],
    images: &ImageSource,
    config: &TrainConfig,
) -> Result<Vec<Checkpoint>, TrainError> {
    if manifests.is_empty() {
        return Err(TrainError::Config("cRT needs at least one re-sampled manifest".into()));
    }
    let cfg = TrainConfig { train_backbone: false, ..config.clone() };
    manifests
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut network = checkpoint.network.clone();
            network.decoder.reinitialize(derive_seed(config.seed, &[b"crt", &(i as u64).to_le_bytes()]));
            train_network(network, m, images, checkpoint.branch, &cfg).map(|o| o.checkpoint)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;

    #[test]
    fn overrides_reach_nested_keys_and_reject_unknown() {
        let c = TrainConfig::default();
        let c2 = c.with_override("loss.kind", "focal").unwrap();
        assert_eq!(c2.loss.kind, LossKind::Focal);
        let c3 = c2.with_override("network.embed_dim", "32").unwrap().with_override("learning_rate", "1e-3").unwrap();
        assert_eq!((c3.network.embed_dim, c3.learning_rate), (32, 1e-3));
        assert!(c.with_override("nope", "1").is_err());
        assert!(c.with_override("batch_size", "-3").is_err());
        assert_ne!(c.hash(), c3.hash());
        assert_eq!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let ext = NetworkConfig { backbone: BackboneSpec { kind: BackboneKind::ExternalPretrained, ..BackboneSpec::tiny(64, 16) }, ..Default::default() };
        assert!(TrainConfig { network: ext, ..Default::default() }.validate().is_err());
        let json = r#"{"learning_rate": 0.001, "loss": {"kind": "weighted_bce"}}"#;
        let parsed: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    }
}
