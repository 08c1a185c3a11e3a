use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneCache, BackboneKind, BackboneSpec};
use super::decoder::{DecoderCache, DecoderConfig, MlDecoder};
use super::params::Parameters;
use super::posenc::positional_table;
use super::{FeatureMap, ModelError};
use crate::rng::derive_seed;

/// Architecture description, stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub backbone: BackboneSpec,
    pub image_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// `None` gives one query per class.
    pub num_groups: Option<usize>,
    pub learnable_queries: bool,
    pub positional_encoding: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::tiny(64, 16),
            image_size: 64,
            embed_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            num_groups: None,
            learnable_queries: false,
            positional_encoding: true,
        }
    }
}

impl NetworkConfig {
    pub fn decoder_config(&self, num_classes: usize) -> DecoderConfig {
        DecoderConfig {
            num_classes,
            num_groups: self.num_groups.unwrap_or(num_classes).min(num_classes),
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            learnable_queries: self.learnable_queries,
        }
    }
}

/// Backbone + positional encoding + ML-Decoder over a subset of the global
/// classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// Global class indices predicted by this network, in logit order.
    pub class_indices: Vec<usize>,
    pub class_names: Vec<String>,
    pub backbone: Backbone,
    pub decoder: MlDecoder,
}

pub struct SampleCache {
    backbone: BackboneCache,
    decoder: DecoderCache,
    fmap: FeatureMap,
}

impl SampleCache {
    /// Backbone output before positional encoding.
    pub fn feature_map(&self) -> &FeatureMap {
        &self.fmap
    }
}

impl Network {
    pub fn new(
        config: NetworkConfig,
        class_indices: Vec<usize>,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.backbone.kind != BackboneKind::TinyReference {
            return Err(ModelError::Config("use Network::with_backbone for imported backbones".into()));
        }
        let backbone = Backbone::new(config.backbone.clone(), derive_seed(seed, &[b"backbone"]))?;
        Self::with_backbone(config, backbone, class_indices, class_names, seed)
    }

    pub fn with_backbone(
        config: NetworkConfig,
        backbone: Backbone,
        class_indices: Vec<usize>,
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if class_indices.is_empty() || class_indices.len() != class_names.len() {
            return Err(ModelError::Config("class indices and names must be non-empty and aligned".into()));
        }
        config.backbone.check_input(config.image_size, config.image_size)?;
        if config.positional_encoding && backbone.output_dim() % 2 != 0 {
            return Err(ModelError::Config("positional encoding needs an even backbone width".into()));
        }
        let decoder = MlDecoder::new(
            config.decoder_config(class_indices.len()),
            backbone.output_dim(),
            derive_seed(seed, &[b"decoder"]),
        )?;
        Ok(Self { config, class_indices, class_names, backbone, decoder })
    }

    pub fn num_classes(&self) -> usize {
        self.class_indices.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn forward(&self, image: &Array2<f64>) -> Result<(Array1<f64>, SampleCache), ModelError> {
        let (fmap, bcache) = self.backbone.forward(image)?;
        let mut tokens = fmap.tokens();
        if self.config.positional_encoding {
            let (h, w, d) = fmap.values.dim();
            let table = positional_table(h, w, d)?.into_shape_with_order((h * w, d)).expect("contiguous table");
            tokens += &table;
        }
        let (logits, dcache) = self.decoder.forward(&tokens)?;
        Ok((logits, SampleCache { backbone: bcache, decoder: dcache, fmap }))
    }

    pub fn logits(&self, image: &Array2<f64>) -> Result<Array1<f64>, ModelError> {
        self.forward(image).map(|(l, _)| l)
    }

    /// Gradient of the logits (weighted by `d_logits`) with respect to the
    /// backbone feature map; decoder gradients are accumulated into `grads`.
    pub fn feature_map_grad(&self, cache: &SampleCache, d_logits: &Array1<f64>, grads: &mut Network) -> Array3<f64> {
        let d_tokens = self.decoder.backward(&cache.decoder, d_logits, &mut grads.decoder);
        let (h, w, d) = cache.fmap.values.dim();
        // positional encoding is additive, so the gradient passes through
        d_tokens.into_shape_with_order((h, w, d)).expect("token grid")
    }

    /// Accumulates all parameter gradients into `grads`. With
    /// `train_backbone = false` the backbone pass is skipped.
    pub fn backward(&self, cache: &SampleCache, d_logits: &Array1<f64>, grads: &mut Network, train_backbone: bool) {
        let d_map = self.feature_map_grad(cache, d_logits, grads);
        if train_backbone {
            self.backbone.backward(&cache.backbone, &d_map, &mut grads.backbone, false);
        }
    }

    /// Gradient of `Σ d_logits·logits` with respect to the input image.
    pub fn input_grad(&self, cache: &SampleCache, d_logits: &Array1<f64>) -> Array2<f64> {
        let mut scratch = self.zeros_like();
        let d_map = self.feature_map_grad(cache, d_logits, &mut scratch);
        self.backbone
            .backward(&cache.backbone, &d_map, &mut scratch.backbone, true)
            .expect("input gradient requested")
    }
}

impl Parameters for Network {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut t = self.backbone.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Network {
        let config = NetworkConfig {
            backbone: BackboneSpec::tiny(8, 4),
            image_size: 16,
            embed_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            ..Default::default()
        };
        Network::new(config, vec![0, 2, 3], vec!["a".into(), "c".into(), "d".into()], 7).unwrap()
    }

    #[test]
    fn forward_emits_one_logit_per_class() {
        let net = small();
        let img = Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) % 5) as f64 / 5.0);
        assert_eq!(net.logits(&img).unwrap().len(), 3);
    }

    #[test]
    fn positional_encoding_breaks_token_permutation_symmetry() {
        let mut with = small();
        let img = Array2::from_shape_fn((16, 16), |(i, j)| if i < 8 && j < 8 { 0.9 } else { 0.1 });
        let (fmap, _) = with.backbone.forward(&img).unwrap();
        let tokens = fmap.tokens();
        let perm: Vec<usize> = (0..tokens.nrows()).rev().collect();
        let permuted = tokens.select(ndarray::Axis(0), &perm);
        let (h, w, d) = fmap.values.dim();
        let table = positional_table(h, w, d).unwrap().into_shape_with_order((h * w, d)).unwrap();
        let (a, _) = with.decoder.forward(&(&tokens + &table)).unwrap();
        let (b, _) = with.decoder.forward(&(&permuted + &table)).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(u, v)| (u - v).abs() > 1e-6));
        with.config.positional_encoding = false;
        let (a, _) = with.decoder.forward(&tokens).unwrap();
        let (b, _) = with.decoder.forward(&permuted).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() < 1e-5));
    }

    #[test]
    fn odd_width_with_encoding_is_rejected() {
        let config = NetworkConfig { backbone: BackboneSpec::tiny(7, 4), image_size: 16, ..Default::default() };
        assert!(Network::new(config, vec![0], vec!["a".into()], 0).is_err());
    }
}
