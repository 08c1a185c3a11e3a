//! Weight-manifest directories: `index.json` listing tensors (name, shape,
//! dtype, byte offset) and `weights.bin`, a raw little-endian float32 blob.
//!
//! Used for checkpoints and for importing externally converted backbones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Parameters};

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "weights.bin";
const DTYPE: &str = "float32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightIndex {
    pub tensors: Vec<TensorEntry>,
}

/// Ordered named tensors, as read from or written to a manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl WeightSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push((name.into(), shape, data));
    }

    pub fn extend_from<P: Parameters>(&mut self, prefix: &str, params: &P) {
        for (name, shape, data) in params.tensors() {
            self.push(format!("{prefix}{name}"), shape, data.to_vec());
        }
    }

    pub fn as_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.tensors.iter().map(|(n, s, d)| (n.clone(), (s.clone(), d.clone()))).collect()
    }

    /// Copies `prefix`-named tensors into `params`, checking names and sizes.
    pub fn load_into<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<(), ModelError> {
        let map = self.as_map();
        for (name, dst) in params.tensors_mut() {
            let key = format!("{prefix}{name}");
            let (_, data) = map.get(&key).ok_or_else(|| ModelError::Weights(format!("missing tensor `{key}`")))?;
            if data.len() != dst.len() {
                return Err(ModelError::Weights(format!("tensor `{key}` has {} values, expected {}", data.len(), dst.len())));
            }
            dst.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(ModelError::Weights(format!("tensor `{name}` shape {shape:?} does not match {} values", data.len())));
            }
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), dtype: DTYPE.into(), offset: blob.len() as u64 });
            for &v in data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(BLOB_FILE), blob)?;
        let index = WeightIndex { tensors: entries };
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let index: WeightIndex = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let mut set = WeightSet::default();
        for e in index.tensors {
            if e.dtype != DTYPE {
                return Err(ModelError::Weights(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| ModelError::Weights(format!("tensor `{}` runs past the end of the blob", e.name)))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            set.push(e.name, e.shape, data);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_bit_identical() {
        let mut w = WeightSet::default();
        w.push("a", vec![2, 2], vec![0.1, -2.5, 3.25, 1e-7]);
        w.push("b", vec![3], vec![1.0, 2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path().join("one")).unwrap();
        let back = WeightSet::load(dir.path().join("one")).unwrap();
        back.save(dir.path().join("two")).unwrap();
        for f in [INDEX_FILE, BLOB_FILE] {
            assert_eq!(fs::read(dir.path().join("one").join(f)).unwrap(), fs::read(dir.path().join("two").join(f)).unwrap());
        }
        assert_eq!(back.tensors[1], ("b".to_string(), vec![3], vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn rejects_shape_mismatch_and_truncated_blob() {
        let mut w = WeightSet::default();
        w.push("a", vec![3], vec![1.0]);
        let dir = tempfile::tempdir().unwrap();
        assert!(w.save(dir.path()).is_err());
        let mut ok = WeightSet::default();
        ok.push("a", vec![2], vec![1.0, 2.0]);
        ok.save(dir.path()).unwrap();
        fs::write(dir.path().join(BLOB_FILE), [0u8; 4]).unwrap();
        assert!(WeightSet::load(dir.path()).is_err());
    }
}
