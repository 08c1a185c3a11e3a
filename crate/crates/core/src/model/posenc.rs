//! Fixed 2-D sine–cosine positional encoding.
//!
//! The first D/2 channels encode the row, the last D/2 the column. Within a
//! half of width `d`, channel `i` uses frequency `10000^(-2⌊i/2⌋/d)`, sine
//! on even channels and cosine on odd ones.

use ndarray::Array3;

use super::{FeatureMap, ModelError};

pub fn positional_table(h: usize, w: usize, d: usize) -> Result<Array3<f64>, ModelError> {
    if d == 0 || d % 2 != 0 {
        return Err(ModelError::Config(format!("positional encoding needs an even channel count, got {d}")));
    }
    let half = d / 2;
    let freq: Vec<f64> = (0..half).map(|i| 10000f64.powf(-((2 * (i / 2)) as f64) / half as f64)).collect();
    Ok(Array3::from_shape_fn((h, w, d), |(y, x, c)| {
        let (pos, i) = if c < half { (y, c) } else { (x, c - half) };
        let angle = pos as f64 * freq[i];
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

pub fn positional_encode(fmap: &FeatureMap) -> Result<FeatureMap, ModelError> {
    let (h, w, d) = fmap.values.dim();
    let table = positional_table(h, w, d)?;
    Ok(FeatureMap { values: &fmap.values + &table, spatial_stride: fmap.spatial_stride })
}
