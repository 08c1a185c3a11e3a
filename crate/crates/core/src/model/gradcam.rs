//! Grad-CAM over the final backbone feature map.

use ndarray::{Array1, Array2, Array3, Axis};

use super::{ModelError, Network};

/// Half-pixel-centred bilinear upsampling with edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Heatmap from an activation map and its gradient (both h×w×D).
///
/// Channel weights are spatial means of the gradient; the rectified weighted
/// channel sum is upsampled to `out_h × out_w` and divided by its maximum.
/// An all-zero map stays all-zero.
pub fn gradcam_from_maps(activations: &Array3<f64>, gradients: &Array3<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let weights: Array1<f64> = gradients
        .mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .expect("non-empty feature map");
    let (h, w, _) = activations.dim();
    let cam = Array2::from_shape_fn((h, w), |(y, x)| activations.slice(ndarray::s![y, x, ..]).dot(&weights).max(0.0));
    let mut up = upsample_bilinear(&cam, out_h, out_w);
    let max = up.fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        up.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    up
}

/// Grad-CAM heatmap for logit `class_index` (position within the network's
/// own class list), at input resolution.
pub fn gradcam(network: &Network, image: &Array2<f64>, class_index: usize) -> Result<Array2<f64>, ModelError> {
    let c = network.num_classes();
    if class_index >= c {
        return Err(ModelError::ClassIndex { index: class_index, num_classes: c });
    }
    let (_, cache) = network.forward(image)?;
    let mut onehot = Array1::zeros(c);
    onehot[class_index] = 1.0;
    let mut scratch = network.zeros_like();
    let grad = network.feature_map_grad(&cache, &onehot, &mut scratch);
    let (h, w) = image.dim();
    Ok(gradcam_from_maps(&cache.feature_map().values, &grad, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneSpec, NetworkConfig};

    #[test]
    fn uniform_maps_give_constant_heatmap() {
        let a = Array3::from_elem((4, 4, 3), 0.7);
        let g = Array3::from_elem((4, 4, 3), 0.2);
        let cam = gradcam_from_maps(&a, &g, 16, 16);
        assert_eq!(cam.dim(), (16, 16));
        assert!(cam.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let zero = gradcam_from_maps(&Array3::zeros((2, 2, 2)), &g.slice(ndarray::s![..2, ..2, ..2]).to_owned(), 8, 8);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadrant_energy_puts_argmax_in_that_quadrant() {
        // channel 0 fires in the bottom-right quadrant and carries all of the
        // gradient; channel 1 fires elsewhere with zero gradient
        let (h, w) = (8, 8);
        let a = Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
            let in_q = y >= h / 2 && x >= w / 2;
            match (c, in_q) {
                (0, true) => 1.0 + (y + x) as f64 * 0.01,
                (1, false) => 2.0,
                _ => 0.0,
            }
        });
        let g = Array3::from_shape_fn((h, w, 2), |(y, x, c)| if c == 0 && y >= h / 2 && x >= w / 2 { 1.0 } else { 0.0 });
        let cam = gradcam_from_maps(&a, &g, 32, 32);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for ((i, j), &v) in cam.indexed_iter() {
            if v > best {
                best = v;
                at = (i, j);
            }
        }
        assert!(at.0 >= 16 && at.1 >= 16, "argmax at {at:?}");
    }

    #[test]
    fn network_heatmap_matches_input_shape_and_range() {
        let config = NetworkConfig { backbone: BackboneSpec::tiny(8, 4), image_size: 16, embed_dim: 8, num_heads: 2, ff_dim: 8, ..Default::default() };
        let net = Network::new(config, vec![0, 1], vec!["a".into(), "b".into()], 2).unwrap();
        let img = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 3 + j) % 7) as f64 / 7.0);
        let cam = gradcam(&net, &img, 1).unwrap();
        assert_eq!(cam.dim(), (16, 16));
        assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(gradcam(&net, &img, 2), Err(ModelError::ClassIndex { index: 2, num_classes: 2 })));
    }
}
