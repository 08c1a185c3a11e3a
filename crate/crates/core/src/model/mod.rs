//! Backbone → 2-D positional encoding → ML-Decoder head, with analytic
//! gradients for training and Grad-CAM.

mod backbone;
mod decoder;
mod gradcam;
mod network;
pub mod ops;
mod params;
mod posenc;
pub mod weights;

pub use backbone::{backbone_forward, Backbone, BackboneCache, BackboneKind, BackboneSpec, ConvLayer};
pub use decoder::{DecoderCache, DecoderConfig, MlDecoder};
pub use gradcam::{gradcam, gradcam_from_maps, upsample_bilinear};
pub use network::{Network, NetworkConfig, SampleCache};
pub use params::Parameters;
pub use posenc::{positional_encode, positional_table};

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassIndex { index: usize, num_classes: usize },
    #[error("weights: {0}")]
    Weights(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// H'×W'×D backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub spatial_stride: usize,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Row-major spatial cells as a T×D token matrix.
    pub fn tokens(&self) -> Array2<f64> {
        let (h, w, d) = self.values.dim();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, d))
            .expect("contiguous feature map")
    }
}
