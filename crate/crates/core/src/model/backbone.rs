//! Convolutional backbone.
//!
//! A stack of 3×3 convolutions (padding 1) with GELU activations. The tiny
//! reference network has four stages of widths (16, 32, 48, D); the first
//! log2(stride) stages downsample by two. External backbones use the same
//! stage layout with tensors imported from a weight manifest.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad};
use super::params::{slice, slice_mut, Parameters};
use super::{FeatureMap, ModelError};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TinyReference,
    ExternalPretrained,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub output_dim: usize,
    pub spatial_stride: usize,
}

impl BackboneSpec {
    pub const TINY_WIDTHS: [usize; 3] = [16, 32, 48];

    pub fn tiny(output_dim: usize, spatial_stride: usize) -> Self {
        Self { kind: BackboneKind::TinyReference, output_dim, spatial_stride }
    }

    fn downsampling_stages(&self) -> Result<usize, ModelError> {
        let s = self.spatial_stride;
        if s == 0 || !s.is_power_of_two() {
            return Err(ModelError::Config(format!("spatial stride {s} must be a power of two")));
        }
        Ok(s.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.output_dim == 0 {
            return Err(ModelError::Config("backbone output_dim must be positive".into()));
        }
        let down = self.downsampling_stages()?;
        if self.kind == BackboneKind::TinyReference && down > 4 {
            return Err(ModelError::Config(format!(
                "tiny backbone supports strides up to 16, got {}",
                self.spatial_stride
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<(), ModelError> {
        if h == 0 || w == 0 || h % self.spatial_stride != 0 || w % self.spatial_stride != 0 {
            return Err(ModelError::Shape(format!(
                "input {h}×{w} is not divisible by spatial stride {}",
                self.spatial_stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// out × (in·9)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub stages: Vec<ConvLayer>,
}

/// Per-stage im2col inputs and pre-activations.
pub struct BackboneCache {
    stages: Vec<StageCache>,
    input_dims: (usize, usize),
    out_dims: (usize, usize),
}

struct StageCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    in_dims: (usize, usize, usize),
}

impl Backbone {
    /// He-initialised tiny reference backbone.
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        if spec.kind != BackboneKind::TinyReference {
            return Err(ModelError::Config("external backbones are built with Backbone::from_tensors".into()));
        }
        let down = spec.downsampling_stages()?;
        let mut rng = seeded(seed);
        let mut widths = vec![1usize];
        widths.extend(BackboneSpec::TINY_WIDTHS);
        widths.push(spec.output_dim);
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let fan_in = w[0] * 9;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                ConvLayer {
                    weight: Array2::from_shape_fn((w[1], fan_in), |_| normal.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                    stride: if i < down { 2 } else { 1 },
                }
            })
            .collect();
        Ok(Self { spec, stages })
    }

    /// Builds a backbone from `backbone.stage{i}.weight` (out×in×3×3) and
    /// `backbone.stage{i}.bias` tensors.
    pub fn from_tensors(
        spec: BackboneSpec,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let down = spec.downsampling_stages()?;
        let mut stages = Vec::new();
        let mut in_ch = 1usize;
        while let Some((shape, data)) = tensors.get(&format!("backbone.stage{}.weight", stages.len())) {
            let i = stages.len();
            if shape.len() != 4 || shape[1] != in_ch || shape[2] != 3 || shape[3] != 3 {
                return Err(ModelError::Weights(format!("stage {i} weight has shape {shape:?}, expected [out, {in_ch}, 3, 3]")));
            }
            let out = shape[0];
            let (bshape, bias) = tensors
                .get(&format!("backbone.stage{i}.bias"))
                .ok_or_else(|| ModelError::Weights(format!("missing backbone.stage{i}.bias")))?;
            if bshape != &vec![out] {
                return Err(ModelError::Weights(format!("stage {i} bias has shape {bshape:?}")));
            }
            stages.push(ConvLayer {
                weight: Array2::from_shape_vec((out, in_ch * 9), data.clone()).map_err(|e| ModelError::Weights(e.to_string()))?,
                bias: Array1::from(bias.clone()),
                stride: if i < down { 2 } else { 1 },
            });
            in_ch = out;
        }
        if stages.len() < down.max(1) {
            return Err(ModelError::Weights(format!(
                "{} stages cannot provide stride {}",
                stages.len(),
                spec.spatial_stride
            )));
        }
        if in_ch != spec.output_dim {
            return Err(ModelError::Weights(format!("final width {in_ch} != output_dim {}", spec.output_dim)));
        }
        Ok(Self { spec, stages })
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map(|s| s.out_channels()).unwrap_or(1)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn forward(&self, image: &Array2<f64>) -> Result<(FeatureMap, BackboneCache), ModelError> {
        let (h, w) = image.dim();
        self.spec.check_input(h, w)?;
        let mut act: Vec<f64> = image.iter().copied().collect();
        let (mut c, mut hh, mut ww) = (1usize, h, w);
        let mut caches = Vec::with_capacity(self.stages.len());
        for layer in &self.stages {
            let (cols, ho, wo) = im2col(&act, c, hh, ww, layer.stride);
            let mut pre = layer.weight.dot(&cols);
            pre += &layer.bias.view().insert_axis(Axis(1));
            act = pre.iter().map(|&z| gelu(z)).collect();
            caches.push(StageCache { cols, pre, in_dims: (c, hh, ww) });
            c = layer.out_channels();
            hh = ho;
            ww = wo;
        }
        // channel-major [D, h, w] → [h, w, D]
        let chw = Array3::from_shape_vec((c, hh, ww), act).expect("stage output size");
        let values = chw.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
        Ok((
            FeatureMap { values, spatial_stride: self.spec.spatial_stride },
            BackboneCache { stages: caches, input_dims: (h, w), out_dims: (hh, ww) },
        ))
    }

    /// Accumulates parameter gradients for upstream `d_out` (h×w×D) into
    /// `grads`; returns the input gradient when `input_grad` is set.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_out: &Array3<f64>,
        grads: &mut Backbone,
        input_grad: bool,
    ) -> Option<Array2<f64>> {
        let (hh, ww) = cache.out_dims;
        let d = d_out.dim().2;
        let mut d_act: Array2<f64> = d_out
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, hh * ww))
            .expect("contiguous gradient");
        for (i, (layer, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let mut dz = d_act;
            dz.zip_mut_with(&sc.pre, |g, &z| *g *= gelu_grad(z));
            let g = &mut grads.stages[i];
            ndarray::linalg::general_mat_mul(1.0, &dz, &sc.cols.t(), 1.0, &mut g.weight);
            g.bias += &dz.sum_axis(Axis(1));
            if i == 0 && !input_grad {
                return None;
            }
            let dcols = layer.weight.t().dot(&dz);
            let (c, h, w) = sc.in_dims;
            let prev = col2im(&dcols, c, h, w, layer.stride);
            d_act = Array2::from_shape_vec((c, h * w), prev).expect("col2im size");
        }
        let (h, w) = cache.input_dims;
        Some(d_act.into_shape_with_order((h, w)).expect("single input channel"))
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// (c·9) × (ho·wo) patch matrix for a 3×3 kernel with zero padding 1.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let ho = out_size(h, stride);
    let wo = out_size(w, stride);
    let p = ho * wo;
    let mut cols = vec![0.0; c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((c * 9, p), cols).expect("im2col size"), ho, wo)
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let ho = out_size(h, stride);
    let wo = out_size(w, stride);
    let p = ho * wo;
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Batch forward over B×H×W images.
pub fn backbone_forward(images: &Array3<f64>, backbone: &Backbone) -> Result<Vec<FeatureMap>, ModelError> {
    (0..images.dim().0)
        .into_par_iter()
        .map(|i| backbone.forward(&images.index_axis(Axis(0), i).to_owned()).map(|(f, _)| f))
        .collect()
}

impl Parameters for Backbone {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(self.stages.len() * 2);
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.weight"), vec![s.out_channels(), s.in_channels(), 3, 3], slice(&s.weight)));
            out.push((format!("backbone.stage{i}.bias"), vec![s.out_channels()], slice(&s.bias)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.stages.len() * 2);
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.stage{i}.weight"), slice_mut(&mut s.weight)));
            out.push((format!("backbone.stage{i}.bias"), slice_mut(&mut s.bias)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shapes_for_stride_eight_and_sixteen() {
        let b = Backbone::new(BackboneSpec::tiny(64, 8), 0).unwrap();
        let (f, _) = b.forward(&Array2::from_elem((64, 64), 0.5)).unwrap();
        assert_eq!(f.values.dim(), (8, 8, 64));
        let b = Backbone::new(BackboneSpec::tiny(64, 16), 0).unwrap();
        assert_eq!(b.stages.len(), 4);
        assert_eq!(b.stages.iter().map(|s| s.out_channels()).collect::<Vec<_>>(), vec![16, 32, 48, 64]);
        let (f, _) = b.forward(&Array2::from_elem((64, 64), 0.5)).unwrap();
        assert_eq!(f.values.dim(), (4, 4, 64));
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let b = Backbone::new(BackboneSpec::tiny(8, 8), 0).unwrap();
        assert!(matches!(b.forward(&Array2::zeros((60, 64))), Err(ModelError::Shape(_))));
    }

    #[test]
    fn zero_final_layer_gives_zero_map() {
        let mut b = Backbone::new(BackboneSpec::tiny(64, 8), 1).unwrap();
        let last = b.stages.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let (f, _) = b.forward(&Array2::zeros((64, 64))).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, s) = (2, 6, 4, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cols, _, _) = im2col(&x, c, h, w, s);
        let y = cols.mapv(|v| v * 0.0 + 1.0) * Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 7 + j) as f64).cos());
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, h, w, s);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn tensors_round_trip_through_from_tensors() {
        let b = Backbone::new(BackboneSpec::tiny(8, 4), 3).unwrap();
        let map: BTreeMap<String, (Vec<usize>, Vec<f64>)> =
            b.tensors().into_iter().map(|(n, s, d)| (n, (s, d.to_vec()))).collect();
        let spec = BackboneSpec { kind: BackboneKind::ExternalPretrained, ..b.spec.clone() };
        let ext = Backbone::from_tensors(spec, &map).unwrap();
        assert_eq!(ext.stages, b.stages);
    }
}
