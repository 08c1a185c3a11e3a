//! ML-Decoder classification head.
//!
//! K group queries attend over the spatial tokens through one cross-attention
//! block; there is no self-attention among queries, so cost is linear in K.
//! Each group's output vector is mapped by its own projection to ⌈C/K⌉ class
//! logits and the K·⌈C/K⌉ logits are truncated to C.
//!
//! Layer order per sample:
//!
//! ```text
//! tokens (T×D) → linear D→E
//! q   = LN1(queries)
//! h1  = LN2(q + MHA(q, tokens, tokens))
//! out = LN3(h1 + W2·gelu(W1·h1))
//! logits[k·G + g] = out[k] · group_w[k, :, g] + group_b[k·G + g]
//! ```

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, mm, softmax_rows, softmax_rows_backward, LayerNormCache};
use super::params::{slice, slice_mut, Parameters};
use super::ModelError;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub num_groups: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub learnable_queries: bool,
}

impl DecoderConfig {
    /// One query per class.
    pub fn per_class(num_classes: usize, embed_dim: usize, num_heads: usize) -> Self {
        Self {
            num_classes,
            num_groups: num_classes,
            embed_dim,
            num_heads,
            ff_dim: 2 * embed_dim,
            learnable_queries: false,
        }
    }

    pub fn group_size(&self) -> usize {
        self.num_classes.div_ceil(self.num_groups)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_classes == 0 || self.num_groups == 0 || self.embed_dim == 0 || self.ff_dim == 0 {
            return bad("decoder dimensions must be positive".into());
        }
        if self.num_groups > self.num_classes {
            return bad(format!("num_groups {} exceeds num_classes {}", self.num_groups, self.num_classes));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("num_heads {} must divide embed_dim {}", self.num_heads, self.embed_dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlDecoder {
    pub config: DecoderConfig,
    pub queries: Array2<f64>,
    pub input_w: Array2<f64>,
    pub input_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ln3_g: Array1<f64>,
    pub ln3_b: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
    /// K × E × G
    pub group_w: Array3<f64>,
    pub group_b: Array1<f64>,
}

pub struct DecoderCache {
    tokens: Array2<f64>,
    proj: Array2<f64>,
    q: Array2<f64>,
    ln1: LayerNormCache,
    qh: Array2<f64>,
    kh: Array2<f64>,
    vh: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LayerNormCache,
    h1: Array2<f64>,
    a1: Array2<f64>,
    g1: Array2<f64>,
    ln3: LayerNormCache,
    out: Array2<f64>,
}

fn dense(rows: usize, cols: usize, normal: &Normal<f64>, rng: &mut crate::rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl MlDecoder {
    pub fn new(config: DecoderConfig, input_dim: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(ModelError::Config("decoder input_dim must be positive".into()));
        }
        let (k, e, f, g) = (config.num_groups, config.embed_dim, config.ff_dim, config.group_size());
        let mut rng = seeded(seed);
        let std = |fan_in: usize| Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        Ok(Self {
            queries: dense(k, e, &unit, &mut rng),
            input_w: dense(input_dim, e, &std(input_dim), &mut rng),
            input_b: Array1::zeros(e),
            wq: dense(e, e, &std(e), &mut rng),
            bq: Array1::zeros(e),
            wk: dense(e, e, &std(e), &mut rng),
            bk: Array1::zeros(e),
            wv: dense(e, e, &std(e), &mut rng),
            bv: Array1::zeros(e),
            wo: dense(e, e, &std(e), &mut rng),
            bo: Array1::zeros(e),
            ln1_g: Array1::ones(e),
            ln1_b: Array1::zeros(e),
            ln2_g: Array1::ones(e),
            ln2_b: Array1::zeros(e),
            ln3_g: Array1::ones(e),
            ln3_b: Array1::zeros(e),
            ff_w1: dense(e, f, &std(e), &mut rng),
            ff_b1: Array1::zeros(f),
            ff_w2: dense(f, e, &std(f), &mut rng),
            ff_b2: Array1::zeros(e),
            group_w: Array3::from_shape_fn((k, e, g), |_| std(e).sample(&mut rng)),
            group_b: Array1::zeros(k * g),
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Re-draws every parameter from the initial distribution.
    pub fn reinitialize(&mut self, seed: u64) {
        *self = MlDecoder::new(self.config.clone(), self.input_dim(), seed).expect("config already validated");
    }

    pub fn forward(&self, tokens: &Array2<f64>) -> Result<(Array1<f64>, DecoderCache), ModelError> {
        if tokens.ncols() != self.input_dim() || tokens.nrows() == 0 {
            return Err(ModelError::Shape(format!(
                "decoder expects T×{} tokens, got {:?}",
                self.input_dim(),
                tokens.dim()
            )));
        }
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let dh = e / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let proj = mm(&tokens.view(), &self.input_w.view()) + &self.input_b;
        let (q, ln1) = layer_norm(&self.queries, &self.ln1_g, &self.ln1_b);
        let qh = mm(&q.view(), &self.wq.view()) + &self.bq;
        let kh = mm(&proj.view(), &self.wk.view()) + &self.bk;
        let vh = mm(&proj.view(), &self.wv.view()) + &self.bv;
        let mut concat = Array2::zeros((cfg.num_groups, e));
        let mut attn = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = mm(&qh.slice(cols), &kh.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&mm(&scores.view(), &vh.slice(cols)));
            attn.push(scores);
        }
        let attended = mm(&concat.view(), &self.wo.view()) + &self.bo;
        let (h1, ln2) = layer_norm(&(&q + &attended), &self.ln2_g, &self.ln2_b);
        let a1 = mm(&h1.view(), &self.ff_w1.view()) + &self.ff_b1;
        let g1 = a1.mapv(gelu);
        let ff = mm(&g1.view(), &self.ff_w2.view()) + &self.ff_b2;
        let (out, ln3) = layer_norm(&(&h1 + &ff), &self.ln3_g, &self.ln3_b);

        let g = cfg.group_size();
        let mut logits = Array1::zeros(cfg.num_classes);
        for k in 0..cfg.num_groups {
            let group = mm(&out.slice(s![k..k + 1, ..]), &self.group_w.index_axis(Axis(0), k));
            for j in 0..g {
                let idx = k * g + j;
                if idx < cfg.num_classes {
                    logits[idx] = group[[0, j]] + self.group_b[idx];
                }
            }
        }
        let cache = DecoderCache { tokens: tokens.clone(), proj, q, ln1, qh, kh, vh, attn, concat, ln2, h1, a1, g1, ln3, out };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients for upstream `d_logits` into `grads`
    /// and returns the gradient with respect to the input tokens.
    pub fn backward(&self, cache: &DecoderCache, d_logits: &Array1<f64>, grads: &mut MlDecoder) -> Array2<f64> {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let dh = e / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let g = cfg.group_size();

        let mut d_out = Array2::zeros((cfg.num_groups, e));
        for k in 0..cfg.num_groups {
            let w = self.group_w.index_axis(Axis(0), k);
            let mut gw = grads.group_w.index_axis_mut(Axis(0), k);
            for j in 0..g {
                let idx = k * g + j;
                if idx >= cfg.num_classes {
                    continue;
                }
                let dl = d_logits[idx];
                grads.group_b[idx] += dl;
                for c in 0..e {
                    gw[[c, j]] += cache.out[[k, c]] * dl;
                    d_out[[k, c]] += w[[c, j]] * dl;
                }
            }
        }

        let d_sum3 = layer_norm_backward(&d_out, &self.ln3_g, &cache.ln3, &mut grads.ln3_g, &mut grads.ln3_b);
        // FFN
        let d_ff = &d_sum3;
        grads.ff_w2 += &cache.g1.t().dot(d_ff);
        grads.ff_b2 += &d_ff.sum_axis(Axis(0));
        let mut d_a1 = d_ff.dot(&self.ff_w2.t());
        d_a1.zip_mut_with(&cache.a1, |d, &z| *d *= gelu_grad(z));
        grads.ff_w1 += &cache.h1.t().dot(&d_a1);
        grads.ff_b1 += &d_a1.sum_axis(Axis(0));
        let d_h1 = &d_sum3 + &d_a1.dot(&self.ff_w1.t());

        let d_sum2 = layer_norm_backward(&d_h1, &self.ln2_g, &cache.ln2, &mut grads.ln2_g, &mut grads.ln2_b);
        let mut d_q = d_sum2.clone();
        // attention output projection
        grads.wo += &cache.concat.t().dot(&d_sum2);
        grads.bo += &d_sum2.sum_axis(Axis(0));
        let d_concat = d_sum2.dot(&self.wo.t());
        let mut d_qh = Array2::zeros(cache.qh.raw_dim());
        let mut d_kh = Array2::zeros(cache.kh.raw_dim());
        let mut d_vh = Array2::zeros(cache.vh.raw_dim());
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let a = &cache.attn[head];
            let d_o = d_concat.slice(cols);
            let d_a = d_o.dot(&cache.vh.slice(cols).t());
            d_vh.slice_mut(cols).assign(&a.t().dot(&d_o));
            let d_s = softmax_rows_backward(a, &d_a) * scale;
            d_qh.slice_mut(cols).assign(&d_s.dot(&cache.kh.slice(cols)));
            d_kh.slice_mut(cols).assign(&d_s.t().dot(&cache.qh.slice(cols)));
        }
        grads.wq += &cache.q.t().dot(&d_qh);
        grads.bq += &d_qh.sum_axis(Axis(0));
        d_q += &d_qh.dot(&self.wq.t());
        grads.wk += &cache.proj.t().dot(&d_kh);
        grads.bk += &d_kh.sum_axis(Axis(0));
        grads.wv += &cache.proj.t().dot(&d_vh);
        grads.bv += &d_vh.sum_axis(Axis(0));
        let d_proj = d_kh.dot(&self.wk.t()) + d_vh.dot(&self.wv.t());

        let d_queries = layer_norm_backward(&d_q, &self.ln1_g, &cache.ln1, &mut grads.ln1_g, &mut grads.ln1_b);
        if self.config.learnable_queries {
            grads.queries += &d_queries;
        }

        grads.input_w += &cache.tokens.t().dot(&d_proj);
        grads.input_b += &d_proj.sum_axis(Axis(0));
        d_proj.dot(&self.input_w.t())
    }
}

impl Parameters for MlDecoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let n = |s: &str| format!("decoder.{s}");
        vec![
            (n("queries"), self.queries.shape().to_vec(), slice(&self.queries)),
            (n("input_w"), self.input_w.shape().to_vec(), slice(&self.input_w)),
            (n("input_b"), self.input_b.shape().to_vec(), slice(&self.input_b)),
            (n("wq"), self.wq.shape().to_vec(), slice(&self.wq)),
            (n("bq"), self.bq.shape().to_vec(), slice(&self.bq)),
            (n("wk"), self.wk.shape().to_vec(), slice(&self.wk)),
            (n("bk"), self.bk.shape().to_vec(), slice(&self.bk)),
            (n("wv"), self.wv.shape().to_vec(), slice(&self.wv)),
            (n("bv"), self.bv.shape().to_vec(), slice(&self.bv)),
            (n("wo"), self.wo.shape().to_vec(), slice(&self.wo)),
            (n("bo"), self.bo.shape().to_vec(), slice(&self.bo)),
            (n("ln1_g"), self.ln1_g.shape().to_vec(), slice(&self.ln1_g)),
            (n("ln1_b"), self.ln1_b.shape().to_vec(), slice(&self.ln1_b)),
            (n("ln2_g"), self.ln2_g.shape().to_vec(), slice(&self.ln2_g)),
            (n("ln2_b"), self.ln2_b.shape().to_vec(), slice(&self.ln2_b)),
            (n("ln3_g"), self.ln3_g.shape().to_vec(), slice(&self.ln3_g)),
            (n("ln3_b"), self.ln3_b.shape().to_vec(), slice(&self.ln3_b)),
            (n("ff_w1"), self.ff_w1.shape().to_vec(), slice(&self.ff_w1)),
            (n("ff_b1"), self.ff_b1.shape().to_vec(), slice(&self.ff_b1)),
            (n("ff_w2"), self.ff_w2.shape().to_vec(), slice(&self.ff_w2)),
            (n("ff_b2"), self.ff_b2.shape().to_vec(), slice(&self.ff_b2)),
            (n("group_w"), self.group_w.shape().to_vec(), slice(&self.group_w)),
            (n("group_b"), self.group_b.shape().to_vec(), slice(&self.group_b)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let n = |s: &str| format!("decoder.{s}");
        vec![
            (n("queries"), slice_mut(&mut self.queries)),
            (n("input_w"), slice_mut(&mut self.input_w)),
            (n("input_b"), slice_mut(&mut self.input_b)),
            (n("wq"), slice_mut(&mut self.wq)),
            (n("bq"), slice_mut(&mut self.bq)),
            (n("wk"), slice_mut(&mut self.wk)),
            (n("bk"), slice_mut(&mut self.bk)),
            (n("wv"), slice_mut(&mut self.wv)),
            (n("bv"), slice_mut(&mut self.bv)),
            (n("wo"), slice_mut(&mut self.wo)),
            (n("bo"), slice_mut(&mut self.bo)),
            (n("ln1_g"), slice_mut(&mut self.ln1_g)),
            (n("ln1_b"), slice_mut(&mut self.ln1_b)),
            (n("ln2_g"), slice_mut(&mut self.ln2_g)),
            (n("ln2_b"), slice_mut(&mut self.ln2_b)),
            (n("ln3_g"), slice_mut(&mut self.ln3_g)),
            (n("ln3_b"), slice_mut(&mut self.ln3_b)),
            (n("ff_w1"), slice_mut(&mut self.ff_w1)),
            (n("ff_b1"), slice_mut(&mut self.ff_b1)),
            (n("ff_w2"), slice_mut(&mut self.ff_w2)),
            (n("ff_b2"), slice_mut(&mut self.ff_b2)),
            (n("group_w"), slice_mut(&mut self.group_w)),
            (n("group_b"), slice_mut(&mut self.group_b)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ops::count_macs;

    fn tokens(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((t, d), |_| n.sample(&mut rng))
    }

    #[test]
    fn nineteen_logits_from_eight_by_eight_map() {
        let dec = MlDecoder::new(DecoderConfig::per_class(19, 128, 8), 64, 0).unwrap();
        let (logits, _) = dec.forward(&tokens(64, 64, 1)).unwrap();
        assert_eq!(logits.len(), 19);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn group_mode_truncates_to_class_count() {
        let cfg = DecoderConfig { num_groups: 4, ..DecoderConfig::per_class(10, 16, 2) };
        assert_eq!(cfg.group_size(), 3);
        let dec = MlDecoder::new(cfg, 8, 0).unwrap();
        assert_eq!(dec.group_w.dim(), (4, 16, 3));
        let (logits, _) = dec.forward(&tokens(5, 8, 2)).unwrap();
        assert_eq!(logits.len(), 10);
    }

    #[test]
    fn zero_group_projection_gives_zero_logits() {
        let mut dec = MlDecoder::new(DecoderConfig::per_class(6, 16, 4), 8, 3).unwrap();
        dec.group_w.fill(0.0);
        dec.group_b.fill(0.0);
        for seed in 0..3 {
            let (logits, _) = dec.forward(&tokens(9, 8, seed)).unwrap();
            assert!(logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(DecoderConfig { num_groups: 7, ..DecoderConfig::per_class(6, 16, 4) }.validate().is_err());
        assert!(DecoderConfig::per_class(6, 18, 4).validate().is_err());
        let dec = MlDecoder::new(DecoderConfig::per_class(3, 8, 2), 4, 0).unwrap();
        assert!(matches!(dec.forward(&tokens(3, 5, 0)), Err(ModelError::Shape(_))));
    }

    #[test]
    fn cost_is_linear_in_groups() {
        let cost = |k: usize| {
            let cfg = DecoderConfig { num_groups: k, ..DecoderConfig::per_class(20, 32, 4) };
            let dec = MlDecoder::new(cfg, 16, 0).unwrap();
            let x = tokens(64, 16, 0);
            count_macs(|| dec.forward(&x).unwrap()).1
        };
        let (c10, c20) = (cost(10), cost(20));
        assert!(c20 > c10);
        assert!((c20 as f64) / (c10 as f64) < 2.2, "{c10} vs {c20}");
    }

    #[test]
    fn key_permutation_leaves_logits_unchanged() {
        let dec = MlDecoder::new(DecoderConfig::per_class(5, 16, 2), 8, 4).unwrap();
        let x = tokens(12, 8, 5);
        let perm: Vec<usize> = (0..12).rev().collect();
        let xp = x.select(Axis(0), &perm);
        let (a, _) = dec.forward(&x).unwrap();
        let (b, _) = dec.forward(&xp).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() < 1e-5));
    }
}
