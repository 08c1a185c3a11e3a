//! Checkpoint directories:
//!
//! ```text
//! <dir>/model.json          architecture, branch, classes, epoch, config + hash
//! <dir>/weights/            weight manifest of the network
//! <dir>/optimizer/          weight manifest of the Lion momentum
//! <dir>/metrics.csv         epoch, train_loss, val_loss, val_map
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, TrainError};
use crate::ensemble::Branch;
use crate::model::weights::WeightSet;
use crate::model::{Backbone, BackboneKind, BackboneSpec, ModelError, Network, NetworkConfig};

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const WEIGHTS_DIR: &str = "weights";
pub const OPTIMIZER_DIR: &str = "optimizer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: OptimizerState<Network>,
    pub branch: Branch,
    /// Epoch the parameters were taken from (1-based).
    pub epoch: usize,
    pub config: TrainConfig,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    branch: Branch,
    class_indices: Vec<usize>,
    class_names: Vec<String>,
    network: NetworkConfig,
    epoch: usize,
    optimizer_steps: u64,
    config_hash: String,
    train_config: TrainConfig,
}

impl Checkpoint {
    /// Validation mAP of the selected epoch, when recorded.
    pub fn best_val_map(&self) -> Option<f64> {
        self.history.iter().find(|m| m.epoch == self.epoch).and_then(|m| m.val_map)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut weights = WeightSet::default();
        weights.extend_from("", &self.network);
        weights.save(dir.join(WEIGHTS_DIR))?;
        let mut momentum = WeightSet::default();
        momentum.extend_from("", &self.optimizer.momentum);
        momentum.save(dir.join(OPTIMIZER_DIR))?;
        let meta = ModelFile {
            format_version: FORMAT_VERSION,
            branch: self.branch,
            class_indices: self.network.class_indices.clone(),
            class_names: self.network.class_names.clone(),
            network: self.network.config.clone(),
            epoch: self.epoch,
            optimizer_steps: self.optimizer.steps,
            config_hash: self.config.hash(),
            train_config: self.config.clone(),
        };
        fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
        for m in &self.history {
            w.serialize(m)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
        let dir = dir.as_ref();
        let meta: ModelFile = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_FILE))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(TrainError::Config(format!("unsupported checkpoint format {}", meta.format_version)));
        }
        if meta.config_hash != meta.train_config.hash() {
            return Err(TrainError::Config("checkpoint config hash does not match its config".into()));
        }
        let weights = WeightSet::load(dir.join(WEIGHTS_DIR))?;
        let network = network_from_weights(&meta.network, &weights, meta.class_indices, meta.class_names)?;
        let mut momentum = network.zeros_like();
        WeightSet::load(dir.join(OPTIMIZER_DIR))?.load_into("", &mut momentum)?;
        let mut history = Vec::new();
        for row in csv::Reader::from_path(dir.join(METRICS_FILE))?.deserialize() {
            history.push(row?);
        }
        Ok(Checkpoint {
            network,
            optimizer: OptimizerState { momentum, steps: meta.optimizer_steps },
            branch: meta.branch,
            epoch: meta.epoch,
            config: meta.train_config,
            history,
        })
    }
}

fn network_from_weights(
    config: &NetworkConfig,
    weights: &WeightSet,
    class_indices: Vec<usize>,
    class_names: Vec<String>,
) -> Result<Network, ModelError> {
    let map = weights.as_map();
    let backbone = Backbone::from_tensors(config.backbone.clone(), &map)?;
    let mut network = Network::with_backbone(config.clone(), backbone, class_indices, class_names, 0)?;
    weights.load_into("", &mut network)?;
    Ok(network)
}

/// Reads an externally converted backbone from a weight-manifest directory.
pub fn load_backbone(dir: impl AsRef<Path>, spec: BackboneSpec) -> Result<Backbone, ModelError> {
    let weights = WeightSet::load(dir)?;
    let spec = BackboneSpec { kind: BackboneKind::ExternalPretrained, ..spec };
    Backbone::from_tensors(spec, &weights.as_map())
}
