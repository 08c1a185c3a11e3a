//! Central finite-difference checks of the analytic gradients.

use ltcx_core::losses::focal_loss_grad;
use ltcx_core::model::{Backbone, BackboneSpec, DecoderConfig, MlDecoder, Network, NetworkConfig, Parameters};
use ltcx_core::rng::seeded;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
}

#[test]
fn backbone_mean_output_wrt_input() {
    for seed in 0..5 {
        let backbone = Backbone::new(BackboneSpec::tiny(8, 4), 100 + seed).unwrap();
        let img = gaussian(16, 16, seed).mapv(|v| 0.5 + 0.2 * v);
        let f = |x: &Array2<f64>| backbone.forward(x).unwrap().0.values.mean().unwrap();
        let (fmap, cache) = backbone.forward(&img).unwrap();
        let d_out = fmap.values.mapv(|_| 1.0 / fmap.values.len() as f64);
        let mut scratch = backbone.zeros_like();
        let grad = backbone.backward(&cache, &d_out, &mut scratch, true).unwrap();
        let mut rng = seeded(seed);
        for _ in 0..12 {
            let (i, j) = (rng.random_range(0..16), rng.random_range(0..16));
            let mut plus = img.clone();
            plus[[i, j]] += H;
            let mut minus = img.clone();
            minus[[i, j]] -= H;
            let fd = (f(&plus) - f(&minus)) / (2.0 * H);
            assert!(rel_err(fd, grad[[i, j]]) < 1e-3, "seed {seed} ({i},{j}): fd {fd} vs {}", grad[[i, j]]);
        }
    }
}

#[test]
fn backbone_parameter_gradients() {
    for seed in 0..5 {
        let mut backbone = Backbone::new(BackboneSpec::tiny(8, 4), 200 + seed).unwrap();
        let img = gaussian(16, 16, 50 + seed).mapv(|v| 0.5 + 0.2 * v);
        let (fmap, cache) = backbone.forward(&img).unwrap();
        let weights = gaussian(1, fmap.values.len(), seed).into_shape_with_order(fmap.values.raw_dim()).unwrap();
        let mut grads = backbone.zeros_like();
        backbone.backward(&cache, &weights, &mut grads, false);
        let objective = |b: &Backbone| (b.forward(&img).unwrap().0.values * &weights).sum();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        let mut rng = seeded(seed);
        for (t, g) in analytic.iter().enumerate() {
            for _ in 0..4 {
                let k = rng.random_range(0..g.len());
                let orig = backbone.tensors()[t].2[k];
                backbone.tensors_mut()[t].1[k] = orig + H;
                let up = objective(&backbone);
                backbone.tensors_mut()[t].1[k] = orig - H;
                let down = objective(&backbone);
                backbone.tensors_mut()[t].1[k] = orig;
                let fd = (up - down) / (2.0 * H);
                assert!(rel_err(fd, g[k]) < 1e-3, "seed {seed} tensor {t}[{k}]: fd {fd} vs {}", g[k]);
            }
        }
    }
}

#[test]
fn decoder_summed_logits_wrt_queries_and_tokens() {
    for seed in 0..5 {
        let cfg = DecoderConfig { learnable_queries: true, ..DecoderConfig::per_class(5, 16, 4) };
        let mut dec = MlDecoder::new(cfg, 8, 300 + seed).unwrap();
        let tokens = gaussian(9, 8, seed);
        let (logits, cache) = dec.forward(&tokens).unwrap();
        let ones = Array1::ones(logits.len());
        let mut grads = dec.zeros_like();
        let d_tokens = dec.backward(&cache, &ones, &mut grads);
        let mut rng = seeded(seed);
        for _ in 0..10 {
            let (i, j) = (rng.random_range(0..dec.queries.nrows()), rng.random_range(0..dec.queries.ncols()));
            let orig = dec.queries[[i, j]];
            dec.queries[[i, j]] = orig + H;
            let up = dec.forward(&tokens).unwrap().0.sum();
            dec.queries[[i, j]] = orig - H;
            let down = dec.forward(&tokens).unwrap().0.sum();
            dec.queries[[i, j]] = orig;
            let fd = (up - down) / (2.0 * H);
            assert!(rel_err(fd, grads.queries[[i, j]]) < 1e-3, "seed {seed} query ({i},{j}): fd {fd} vs {}", grads.queries[[i, j]]);
        }
        for _ in 0..10 {
            let (i, j) = (rng.random_range(0..9), rng.random_range(0..8));
            let mut plus = tokens.clone();
            plus[[i, j]] += H;
            let mut minus = tokens.clone();
            minus[[i, j]] -= H;
            let fd = (dec.forward(&plus).unwrap().0.sum() - dec.forward(&minus).unwrap().0.sum()) / (2.0 * H);
            assert!(rel_err(fd, d_tokens[[i, j]]) < 1e-3, "seed {seed} token ({i},{j})");
        }
    }
}

#[test]
fn decoder_every_parameter_tensor() {
    for seed in 0..5 {
        let cfg = DecoderConfig { num_groups: 3, ..DecoderConfig::per_class(7, 8, 2) };
        let mut dec = MlDecoder::new(cfg, 6, 400 + seed).unwrap();
        let tokens = gaussian(5, 6, seed);
        let w: Array1<f64> = gaussian(1, 7, 10 + seed).row(0).to_owned();
        let (_, cache) = dec.forward(&tokens).unwrap();
        let mut grads = dec.zeros_like();
        dec.backward(&cache, &w, &mut grads);
        let objective = |d: &MlDecoder| d.forward(&tokens).unwrap().0.dot(&w);
        let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect();
        let mut rng = seeded(seed);
        for (t, (name, g)) in analytic.iter().enumerate() {
            for _ in 0..3 {
                let k = rng.random_range(0..g.len());
                let orig = dec.tensors()[t].2[k];
                dec.tensors_mut()[t].1[k] = orig + H;
                let up = objective(&dec);
                dec.tensors_mut()[t].1[k] = orig - H;
                let down = objective(&dec);
                dec.tensors_mut()[t].1[k] = orig;
                let fd = (up - down) / (2.0 * H);
                // the fixed queries never receive a gradient
                if name == "decoder.queries" && !dec.config.learnable_queries {
                    assert_eq!(g[k], 0.0);
                    continue;
                }
                assert!((fd - g[k]).abs() < 1e-7 || rel_err(fd, g[k]) < 1e-3, "seed {seed} {name}[{k}]: fd {fd} vs {}", g[k]);
            }
        }
    }
}

#[test]
fn focal_loss_wrt_logits() {
    for seed in 0..5 {
        let mut rng = seeded(seed);
        let z = gaussian(4, 3, seed).mapv(|v| 3.0 * v);
        let y = Array2::from_shape_fn((4, 3), |_| u8::from(rng.random_bool(0.5)));
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let gamma = [0.0, 0.5, 1.0, 2.0, 3.5][seed as usize];
        let (_, grad) = focal_loss_grad(&z, &y, &alpha, gamma).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = z.clone();
                plus[[i, j]] += H;
                let mut minus = z.clone();
                minus[[i, j]] -= H;
                let fd = (focal_loss_grad(&plus, &y, &alpha, gamma).unwrap().0 - focal_loss_grad(&minus, &y, &alpha, gamma).unwrap().0)
                    / (2.0 * H);
                assert!(rel_err(fd, grad[[i, j]]) < 1e-3, "seed {seed} ({i},{j}): fd {fd} vs {}", grad[[i, j]]);
            }
        }
    }
}

#[test]
fn full_network_input_gradient() {
    let config = NetworkConfig { backbone: BackboneSpec::tiny(8, 4), image_size: 16, embed_dim: 8, num_heads: 2, ff_dim: 16, ..Default::default() };
    let net = Network::new(config, vec![0, 1, 2], vec!["a".into(), "b".into(), "c".into()], 9).unwrap();
    let img = gaussian(16, 16, 3).mapv(|v| 0.5 + 0.2 * v);
    let w = Array1::from(vec![0.3, -1.0, 0.7]);
    let (_, cache) = net.forward(&img).unwrap();
    let grad = net.input_grad(&cache, &w);
    let mut rng = seeded(4);
    for _ in 0..10 {
        let (i, j) = (rng.random_range(0..16), rng.random_range(0..16));
        let mut plus = img.clone();
        plus[[i, j]] += H;
        let mut minus = img.clone();
        minus[[i, j]] -= H;
        let fd = (net.logits(&plus).unwrap().dot(&w) - net.logits(&minus).unwrap().dot(&w)) / (2.0 * H);
        assert!((fd - grad[[i, j]]).abs() < 1e-8 || rel_err(fd, grad[[i, j]]) < 1e-3, "({i},{j}): fd {fd} vs {}", grad[[i, j]]);
    }
}
