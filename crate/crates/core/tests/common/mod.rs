#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ltcx_core::datakit::{
    class_counts, generate_synthetic, partition_classes, DatasetManifest, ImageSource, Record, Split, SynthConfig,
};
use ltcx_core::model::{BackboneSpec, NetworkConfig};
use ltcx_core::training::TrainConfig;
use ltcx_core::ClassPartition;

/// 16×16 network small enough for many short runs.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig { backbone: BackboneSpec::tiny(8, 4), image_size: 16, embed_dim: 8, num_heads: 2, ff_dim: 16, ..Default::default() }
}

/// Wide enough to memorise a handful of images quickly.
pub fn memorise_config() -> TrainConfig {
    let network = NetworkConfig { backbone: BackboneSpec::tiny(32, 4), embed_dim: 32, ff_dim: 64, ..tiny_network() };
    TrainConfig { learning_rate: 3e-4, batch_size: 10, epochs: 200, max_steps: Some(200), augment: false, network, ..tiny_config() }
}

/// The first `n` records of `manifest`, all moved to the training split.
pub fn memorisation_set(manifest: &DatasetManifest, n: usize) -> DatasetManifest {
    let records: Vec<Record> = manifest.records.iter().take(n).map(|r| Record { split: Split::Train, ..r.clone() }).collect();
    assert_eq!(records.len(), n);
    DatasetManifest::new(manifest.class_names.clone(), records).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 1,
        network: tiny_network(),
        workers: 1,
        ..Default::default()
    }
}

/// Synthetic 16×16 dataset with clearly visible patterns.
pub fn dataset(num_samples: usize, num_classes: usize, exponent: f64, seed: u64) -> (DatasetManifest, ImageSource, ClassPartition) {
    let cfg = SynthConfig {
        num_samples,
        num_classes,
        image_size: 16,
        powerlaw_exponent: exponent,
        pattern_amplitude: 0.5,
        noise_std: 0.05,
        seed,
        ..Default::default()
    };
    let (manifest, store) = generate_synthetic(&cfg).unwrap();
    let counts = class_counts(&manifest, Split::Train).unwrap();
    let partition = partition_classes(&counts, &manifest.class_names, &manifest.class_names[0], None).unwrap();
    (manifest, ImageSource::from_store(store), partition)
}

/// Every file below `dir`, relative path → bytes, sorted.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
