//! Embedded-array image store.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic   b"LTCXIMG1"
//! u32     image_size (square side, pixels)
//! u64     entry count
//! entries { u32 key_len, key bytes (UTF-8), image_size² × f32 in [0,1] }
//! ```
//!
//! Entries are written in key order, so identical contents give identical
//! files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::DataError;

const MAGIC: &[u8; 8] = b"LTCXIMG1";
pub const STORE_PREFIX: &str = "store:";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageStore {
    image_size: usize,
    images: BTreeMap<String, Vec<f32>>,
}

impl ImageStore {
    pub fn new(image_size: usize) -> Self {
        Self { image_size, images: BTreeMap::new() }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, pixels: Vec<f32>) -> Result<(), DataError> {
        let key = key.into();
        if pixels.len() != self.image_size * self.image_size {
            return Err(DataError::Store(format!(
                "image `{key}` has {} pixels, expected {}",
                pixels.len(),
                self.image_size * self.image_size
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Store(format!("image `{key}` has pixels outside [0, 1]")));
        }
        self.images.insert(key, pixels);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.images.get(key).map(Vec::as_slice)
    }

    pub fn image(&self, key: &str) -> Option<Array2<f64>> {
        let s = self.image_size;
        self.get(key)
            .map(|px| Array2::from_shape_fn((s, s), |(i, j)| px[i * s + j] as f64))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.image_size as u32).to_le_bytes())?;
        w.write_all(&(self.images.len() as u64).to_le_bytes())?;
        for (key, px) in &self.images {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            for v in px {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Store("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let image_size = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut store = ImageStore::new(image_size);
        let mut raw = vec![0u8; image_size * image_size * 4];
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let mut key = vec![0u8; u32::from_le_bytes(u32buf) as usize];
            r.read_exact(&mut key)?;
            let key = String::from_utf8(key).map_err(|e| DataError::Store(e.to_string()))?;
            r.read_exact(&mut raw)?;
            let px = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            store.images.insert(key, px);
        }
        Ok(store)
    }
}

/// Resolves manifest `image_ref` values to pixel arrays.
///
/// `store:<key>` reads from the embedded store; anything else is a PNG path
/// relative to `base_dir`, converted to grayscale and resized.
#[derive(Debug, Clone)]
pub struct ImageSource {
    pub store: Option<ImageStore>,
    pub base_dir: PathBuf,
    pub image_size: usize,
}

impl ImageSource {
    pub fn from_store(store: ImageStore) -> Self {
        let image_size = store.image_size();
        Self { store: Some(store), base_dir: PathBuf::from("."), image_size }
    }

    pub fn load(&self, image_ref: &str) -> Result<Array2<f64>, DataError> {
        if let Some(key) = image_ref.strip_prefix(STORE_PREFIX) {
            let store = self
                .store
                .as_ref()
                .ok_or_else(|| DataError::Store(format!("no image store to resolve `{image_ref}`")))?;
            return store.image(key).ok_or_else(|| DataError::Store(format!("missing image `{key}`")));
        }
        let path = self.base_dir.join(image_ref);
        let img = image::open(&path)
            .map_err(|e| DataError::Store(format!("{}: {e}", path.display())))?
            .into_luma8();
        let s = self.image_size as u32;
        let img = image::imageops::resize(&img, s, s, image::imageops::FilterType::Triangle);
        let n = self.image_size;
        Ok(Array2::from_shape_fn((n, n), |(i, j)| img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0))
    }
}
