use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Smallest side of the written PNG; small inputs are upscaled (nearest).
const MIN_SIDE: usize = 256;

/// Black → red → yellow → white.
fn heat_colour(h: f64) -> [f64; 3] {
    let h = h.clamp(0.0, 1.0);
    [(3.0 * h).min(1.0), (3.0 * h - 1.0).clamp(0.0, 1.0), (3.0 * h - 2.0).clamp(0.0, 1.0)]
}

pub fn write_overlay(image: &Array2<f64>, heat: &Array2<f64>, alpha: f64, out: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let scale = MIN_SIDE.div_ceil(h.max(w)).max(1);
    let mut png = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for (x, y, px) in png.enumerate_pixels_mut() {
        let (i, j) = (y as usize / scale, x as usize / scale);
        let g = image[[i, j]].clamp(0.0, 1.0);
        let c = heat_colour(heat[[i, j]]);
        let mix = |k: usize| (((1.0 - alpha) * g + alpha * c[k]) * 255.0).round() as u8;
        *px = Rgb([mix(0), mix(1), mix(2)]);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    png.save(out).with_context(|| format!("writing {}", out.display()))
}
