//! Training-time augmentation: rotation, padding, brightness, Gaussian blur,
//! contrast and posterization, each applied with its own probability.
//!
//! Policies are validated when constructed (including when deserialized), so
//! [`apply_policy`] cannot fail. Serialized form:
//!
//! ```json
//! { "steps": [ { "kind": "rotate", "min_degrees": -15.0, "max_degrees": 15.0, "probability": 0.5 }, ... ] }
//! ```

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("step {step} ({kind}): {message}")]
    InvalidStep { step: usize, kind: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Rotate { min_degrees: f64, max_degrees: f64 },
    Pad { max_pixels: usize },
    Brightness { min_factor: f64, max_factor: f64 },
    GaussianBlur { min_sigma: f64, max_sigma: f64 },
    Contrast { min_factor: f64, max_factor: f64 },
    Posterize { bits: Vec<u8> },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Rotate { .. } => "rotate",
            Transform::Pad { .. } => "pad",
            Transform::Brightness { .. } => "brightness",
            Transform::GaussianBlur { .. } => "gaussian_blur",
            Transform::Contrast { .. } => "contrast",
            Transform::Posterize { .. } => "posterize",
        }
    }

    fn check(&self) -> Result<(), String> {
        let range = |lo: f64, hi: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                Err(format!("range [{lo}, {hi}] is empty or not finite"))
            } else {
                Ok(())
            }
        };
        match *self {
            Transform::Rotate { min_degrees, max_degrees } => {
                range(min_degrees, max_degrees)?;
                if min_degrees < -180.0 || max_degrees > 180.0 {
                    return Err("rotation must stay within [-180, 180] degrees".into());
                }
            }
            Transform::Pad { .. } => {}
            Transform::Brightness { min_factor, max_factor } | Transform::Contrast { min_factor, max_factor } => {
                range(min_factor, max_factor)?;
                if min_factor <= 0.0 {
                    return Err("factors must be positive".into());
                }
            }
            Transform::GaussianBlur { min_sigma, max_sigma } => {
                range(min_sigma, max_sigma)?;
                if min_sigma < 0.0 {
                    return Err("sigma must be non-negative".into());
                }
            }
            Transform::Posterize { ref bits } => {
                if bits.is_empty() || bits.iter().any(|b| !(1..=8).contains(b)) {
                    return Err("posterize bits must be a non-empty set within [1, 8]".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentStep {
    #[serde(flatten)]
    pub transform: Transform,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct AugmentPolicy {
    steps: Vec<AugmentStep>,
}

#[derive(Deserialize)]
struct RawPolicy {
    steps: Vec<AugmentStep>,
}

impl TryFrom<RawPolicy> for AugmentPolicy {
    type Error = AugmentError;
    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        AugmentPolicy::new(raw.steps)
    }
}

impl AugmentPolicy {
    pub fn new(steps: Vec<AugmentStep>) -> Result<Self, AugmentError> {
        for (i, step) in steps.iter().enumerate() {
            let fail = |message: String| AugmentError::InvalidStep { step: i, kind: step.transform.name(), message };
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(fail(format!("probability {} outside [0, 1]", step.probability)));
            }
            step.transform.check().map_err(fail)?;
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[AugmentStep] {
        &self.steps
    }

    /// Same transforms with every probability set to `p`.
    pub fn with_probability(&self, p: f64) -> Result<Self, AugmentError> {
        Self::new(self.steps.iter().map(|s| AugmentStep { probability: p, ..s.clone() }).collect())
    }
}

/// Six-step default: rotation ±15°, reflect padding up to 8 px, brightness and
/// contrast factors in [0.8, 1.2], blur sigma in [0, 1.5], posterize to 6–8
/// bits; each step fires with probability 0.5.
pub fn default_policy() -> AugmentPolicy {
    let p = 0.5;
    let step = |transform| AugmentStep { transform, probability: p };
    AugmentPolicy::new(vec![
        step(Transform::Rotate { min_degrees: -15.0, max_degrees: 15.0 }),
        step(Transform::Pad { max_pixels: 8 }),
        step(Transform::Brightness { min_factor: 0.8, max_factor: 1.2 }),
        step(Transform::GaussianBlur { min_sigma: 0.0, max_sigma: 1.5 }),
        step(Transform::Contrast { min_factor: 0.8, max_factor: 1.2 }),
        step(Transform::Posterize { bits: vec![6, 7, 8] }),
    ])
    .expect("default policy is valid")
}

/// Applies every step in order with a stream seeded by `seed`. Output keeps
/// the input shape and is clamped to [0, 1].
pub fn apply_policy(image: &Array2<f64>, policy: &AugmentPolicy, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut out = image.clone();
    for step in &policy.steps {
        if rng.random::<f64>() >= step.probability {
            continue;
        }
        out = match &step.transform {
            Transform::Rotate { min_degrees, max_degrees } => rotate(&out, rng.random_range(*min_degrees..=*max_degrees)),
            Transform::Pad { max_pixels } => pad_and_resize(&out, rng.random_range(0..=*max_pixels)),
            Transform::Brightness { min_factor, max_factor } => {
                adjust_brightness(&out, rng.random_range(*min_factor..=*max_factor))
            }
            Transform::GaussianBlur { min_sigma, max_sigma } => {
                gaussian_blur(&out, rng.random_range(*min_sigma..=*max_sigma))
            }
            Transform::Contrast { min_factor, max_factor } => {
                adjust_contrast(&out, rng.random_range(*min_factor..=*max_factor))
            }
            Transform::Posterize { bits } => posterize(&out, bits[rng.random_range(0..bits.len())]),
        };
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image centre with bilinear sampling; pixels mapped from
/// outside the frame are black.
pub fn rotate(img: &Array2<f64>, degrees: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
            return 0.0;
        }
        bilinear(img, sy.clamp(0.0, h as f64 - 1.0), sx.clamp(0.0, w as f64 - 1.0))
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Align-corners bilinear resize.
pub fn resize(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let sy = if out_h > 1 { (h as f64 - 1.0) / (out_h as f64 - 1.0) } else { 0.0 };
    let sx = if out_w > 1 { (w as f64 - 1.0) / (out_w as f64 - 1.0) } else { 0.0 };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| bilinear(img, i as f64 * sy, j as f64 * sx))
}

/// Reflect-pads by `amount` on every side, then resizes back.
pub fn pad_and_resize(img: &Array2<f64>, amount: usize) -> Array2<f64> {
    if amount == 0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let a = amount as isize;
    let padded = Array2::from_shape_fn((h + 2 * amount, w + 2 * amount), |(i, j)| {
        img[[reflect(i as isize - a, h), reflect(j as isize - a, w)]]
    });
    resize(&padded, h, w)
}

pub fn adjust_brightness(img: &Array2<f64>, factor: f64) -> Array2<f64> {
    img.mapv(|v| v * factor)
}

/// Scales deviations from the image mean.
pub fn adjust_contrast(img: &Array2<f64>, factor: f64) -> Array2<f64> {
    let mean = img.mean().unwrap_or(0.0);
    img.mapv(|v| mean + factor * (v - mean))
}

/// Separable Gaussian blur with reflected borders and a ±3σ kernel.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma < 1e-6 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dim();
    let horizontal = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * img[[i, reflect(j as isize + k as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horizontal[[reflect(i as isize + k as isize - radius, h), j]])
            .sum::<f64>()
    })
}

/// Keeps the top `bits` bits of the 8-bit quantised intensity.
pub fn posterize(img: &Array2<f64>, bits: u8) -> Array2<f64> {
    let mask: u8 = !(((1u16 << (8 - bits)) - 1) as u8);
    img.mapv(|v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        (q & mask) as f64 / 255.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| ((i * w + j) % 256) as f64 / 255.0)
    }

    fn single(transform: Transform) -> AugmentPolicy {
        AugmentPolicy::new(vec![AugmentStep { transform, probability: 1.0 }]).unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = ramp(12, 9);
        let out = apply_policy(&img, &single(Transform::Rotate { min_degrees: 0.0, max_degrees: 0.0 }), 1);
        assert_eq!(out, img);
    }

    #[test]
    fn eight_bit_posterize_is_identity_on_quantised_input() {
        let img = ramp(16, 16);
        let out = apply_policy(&img, &single(Transform::Posterize { bits: vec![8] }), 5);
        assert_eq!(out, img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = ramp(20, 20);
        let policy = default_policy().with_probability(1.0).unwrap();
        assert_eq!(apply_policy(&img, &policy, 42), apply_policy(&img, &policy, 42));
        assert_ne!(apply_policy(&img, &policy, 42), apply_policy(&img, &policy, 43));
    }

    #[test]
    fn default_policy_has_six_kinds_in_order() {
        let kinds: Vec<&str> = default_policy().steps().iter().map(|s| s.transform.name()).collect();
        assert_eq!(kinds, ["rotate", "pad", "brightness", "gaussian_blur", "contrast", "posterize"]);
    }

    #[test]
    fn default_policy_serde_round_trip() {
        let p = default_policy();
        let json = serde_json::to_string_pretty(&p).unwrap();
        let back: AugmentPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn invalid_parameters_rejected_at_construction() {
        let bad = [
            Transform::Rotate { min_degrees: -200.0, max_degrees: 0.0 },
            Transform::Brightness { min_factor: 0.0, max_factor: 1.0 },
            Transform::Contrast { min_factor: -1.0, max_factor: 1.0 },
            Transform::GaussianBlur { min_sigma: -0.5, max_sigma: 1.0 },
            Transform::Posterize { bits: vec![0] },
            Transform::Posterize { bits: vec![9] },
        ];
        for t in bad {
            assert!(AugmentPolicy::new(vec![AugmentStep { transform: t, probability: 0.5 }]).is_err());
        }
        let json = r#"{"steps":[{"kind":"posterize","bits":[12],"probability":0.5}]}"#;
        assert!(serde_json::from_str::<AugmentPolicy>(json).is_err());
        let json = r#"{"steps":[{"kind":"pad","max_pixels":2,"probability":1.5}]}"#;
        assert!(serde_json::from_str::<AugmentPolicy>(json).is_err());
    }

    #[test]
    fn zero_pad_and_zero_blur_are_identity() {
        let img = ramp(10, 10);
        assert_eq!(pad_and_resize(&img, 0), img);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Array2::from_elem((9, 9), 0.3);
        let out = gaussian_blur(&img, 1.2);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn output_stays_in_unit_range(
            pixels in proptest::collection::vec(0.0f64..=1.0, 144),
            probs in proptest::collection::vec(0.0f64..=1.0, 6),
            seed in any::<u64>(),
            wide in 0.0f64..180.0,
            gain in 0.1f64..4.0,
        ) {
            let img = Array2::from_shape_vec((12, 12), pixels).unwrap();
            let transforms = [
                Transform::Rotate { min_degrees: -wide, max_degrees: wide },
                Transform::Pad { max_pixels: 5 },
                Transform::Brightness { min_factor: 0.1, max_factor: gain },
                Transform::GaussianBlur { min_sigma: 0.0, max_sigma: 2.0 },
                Transform::Contrast { min_factor: 0.1, max_factor: gain },
                Transform::Posterize { bits: vec![1, 4, 8] },
            ];
            let steps = transforms.into_iter().zip(probs).map(|(transform, probability)| AugmentStep { transform, probability }).collect();
            let out = apply_policy(&img, &AugmentPolicy::new(steps).unwrap(), seed);
            prop_assert_eq!(out.dim(), (12, 12));
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn zero_probability_is_identity(pixels in proptest::collection::vec(0.0f64..=1.0, 64), seed in any::<u64>()) {
            let img = Array2::from_shape_vec((8, 8), pixels).unwrap();
            let policy = default_policy().with_probability(0.0).unwrap();
            prop_assert_eq!(apply_policy(&img, &policy, seed), img);
        }

        #[test]
        fn brightness_inverse_recovers_input(pixels in proptest::collection::vec(0.0f64..=0.5, 64), f in 0.5f64..2.0) {
            let img = Array2::from_shape_vec((8, 8), pixels).unwrap();
            let back = adjust_brightness(&adjust_brightness(&img, f), 1.0 / f);
            prop_assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }
}
