//! Multi-label losses over B×C logits with mean reduction.
//!
//! Every loss is written in terms of `softplus`, using
//! `−log σ(z) = softplus(−z)` and `−log(1 − σ(z)) = softplus(z)`, so it stays
//! finite for large |z|. The `*_grad` variants also return dL/dz.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::LabelMatrix;
use crate::model::ops::sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss configuration: {0}")]
    Config(String),
    #[error("class `{0}` has no positive samples")]
    NoPositives(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    WeightedBce,
    Focal,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::WeightedBce => "weighted_bce",
            LossKind::Focal => "focal",
        }
    }
}

/// Loss selection. `pos_weights` and `alpha` are indexed by global class;
/// the trainer restricts them to the branch classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Missing weights for `weighted_bce` are computed from the training split.
    pub pos_weights: Option<Vec<f64>>,
    /// Missing alphas for `focal` default to 0.5 for every class.
    pub alpha: Option<Vec<f64>>,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Bce, pos_weights: None, alpha: None, gamma: 2.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::Config(format!("gamma must be a finite value ≥ 0, got {}", self.gamma)));
        }
        if let Some(w) = &self.pos_weights {
            check_pos_weights(w)?;
        }
        if let Some(a) = &self.alpha {
            check_alpha(a)?;
        }
        Ok(())
    }

    /// Copy with per-class vectors restricted to `indices`.
    pub fn restrict(&self, indices: &[usize]) -> Result<LossConfig, LossError> {
        let pick = |v: &Vec<f64>, what: &str| -> Result<Vec<f64>, LossError> {
            indices
                .iter()
                .map(|&i| v.get(i).copied().ok_or_else(|| LossError::Shape(format!("{what} has no entry for class {i}"))))
                .collect()
        };
        Ok(LossConfig {
            kind: self.kind,
            pos_weights: self.pos_weights.as_ref().map(|v| pick(v, "pos_weights")).transpose()?,
            alpha: self.alpha.as_ref().map(|v| pick(v, "alpha")).transpose()?,
            gamma: self.gamma,
        })
    }

    /// Loss value and logit gradient for one batch.
    pub fn evaluate(&self, logits: &Array2<f64>, labels: &Array2<u8>) -> Result<(f64, Array2<f64>), LossError> {
        let c = logits.ncols();
        match self.kind {
            LossKind::Bce => bce_grad(logits, labels),
            LossKind::WeightedBce => {
                let w = self.pos_weights.as_ref().ok_or_else(|| LossError::Config("weighted_bce needs pos_weights".into()))?;
                weighted_bce_grad(logits, labels, w)
            }
            LossKind::Focal => {
                let alpha = self.alpha.clone().unwrap_or_else(|| vec![0.5; c]);
                focal_loss_grad(logits, labels, &alpha, self.gamma)
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_shapes(logits: &Array2<f64>, labels: &Array2<u8>) -> Result<(), LossError> {
    if logits.dim() != labels.dim() {
        return Err(LossError::Shape(format!("logits {:?} vs labels {:?}", logits.dim(), labels.dim())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(LossError::Shape("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_len(v: &[f64], c: usize, what: &str) -> Result<(), LossError> {
    if v.len() != c {
        return Err(LossError::Shape(format!("{what} has {} entries for {c} classes", v.len())));
    }
    Ok(())
}

fn check_pos_weights(w: &[f64]) -> Result<(), LossError> {
    if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(LossError::Config(format!("pos_weights must be positive, got {bad}")));
    }
    Ok(())
}

fn check_alpha(a: &[f64]) -> Result<(), LossError> {
    if let Some(bad) = a.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(LossError::Config(format!("alpha must lie in (0, 1], got {bad}")));
    }
    Ok(())
}

/// Shared driver: `cell(z, y, class) -> (loss, dloss/dz)`, averaged.
fn reduce(
    logits: &Array2<f64>,
    labels: &Array2<u8>,
    cell: impl Fn(f64, bool, usize) -> (f64, f64),
) -> (f64, Array2<f64>) {
    let n = logits.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    Zip::indexed(&mut grad).and(logits).and(labels).for_each(|(_, c), g, &z, &y| {
        let (l, d) = cell(z, y == 1, c);
        total += l;
        *g = d / n;
    });
    (total / n, grad)
}

pub fn bce(logits: &Array2<f64>, labels: &Array2<u8>) -> Result<f64, LossError> {
    bce_grad(logits, labels).map(|(l, _)| l)
}

pub fn bce_grad(logits: &Array2<f64>, labels: &Array2<u8>) -> Result<(f64, Array2<f64>), LossError> {
    check_shapes(logits, labels)?;
    Ok(reduce(logits, labels, |z, y, _| {
        let p = sigmoid(z);
        if y {
            (softplus(-z), p - 1.0)
        } else {
            (softplus(z), p)
        }
    }))
}

pub fn weighted_bce(logits: &Array2<f64>, labels: &Array2<u8>, pos_weights: &[f64]) -> Result<f64, LossError> {
    weighted_bce_grad(logits, labels, pos_weights).map(|(l, _)| l)
}

pub fn weighted_bce_grad(
    logits: &Array2<f64>,
    labels: &Array2<u8>,
    pos_weights: &[f64],
) -> Result<(f64, Array2<f64>), LossError> {
    check_shapes(logits, labels)?;
    check_len(pos_weights, logits.ncols(), "pos_weights")?;
    check_pos_weights(pos_weights)?;
    Ok(reduce(logits, labels, |z, y, c| {
        let p = sigmoid(z);
        if y {
            (pos_weights[c] * softplus(-z), pos_weights[c] * (p - 1.0))
        } else {
            (softplus(z), p)
        }
    }))
}

pub fn focal_loss(logits: &Array2<f64>, labels: &Array2<u8>, alpha: &[f64], gamma: f64) -> Result<f64, LossError> {
    focal_loss_grad(logits, labels, alpha, gamma).map(|(l, _)| l)
}

pub fn focal_loss_grad(
    logits: &Array2<f64>,
    labels: &Array2<u8>,
    alpha: &[f64],
    gamma: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    check_shapes(logits, labels)?;
    check_len(alpha, logits.ncols(), "alpha")?;
    check_alpha(alpha)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(LossError::Config(format!("gamma must be a finite value ≥ 0, got {gamma}")));
    }
    Ok(reduce(logits, labels, |z, y, c| {
        let p = sigmoid(z);
        let q = sigmoid(-z); // 1 − p without cancellation
        if y {
            let a = alpha[c];
            let sp = softplus(-z);
            let m = q.powf(gamma);
            (a * m * sp, -a * m * (gamma * p * sp + q))
        } else {
            let a = 1.0 - alpha[c];
            let sp = softplus(z);
            let m = p.powf(gamma);
            (a * m * sp, a * m * (gamma * q * sp + p))
        }
    }))
}

/// `(N − n_c) / n_c` per class.
pub fn compute_pos_weights(labels: &LabelMatrix) -> Result<Vec<f64>, LossError> {
    let n = labels.num_samples() as f64;
    (0..labels.num_classes())
        .map(|c| {
            let pos = labels.values.column(c).iter().filter(|&&v| v == 1).count();
            if pos == 0 {
                Err(LossError::NoPositives(labels.class_names[c].clone()))
            } else {
                Ok((n - pos as f64) / pos as f64)
            }
        })
        .collect()
}

/// Focal alphas from baseline per-class AP: `1 − AP`, rescaled to mean 0.5
/// and clipped into (0, 1].
pub fn focal_alpha_from_ap(ap: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = ap.iter().map(|a| (1.0 - a).clamp(0.0, 1.0)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean <= 0.0 {
        return vec![0.5; ap.len()];
    }
    raw.iter().map(|r| (r * 0.5 / mean).clamp(1e-3, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn one(z: f64) -> Array2<f64> {
        array![[z]]
    }

    #[test]
    fn bce_examples() {
        assert!((bce(&one(0.0), &array![[1]]).unwrap() - LN2).abs() < 1e-12);
        let sat = bce(&one(30.0), &array![[1]]).unwrap();
        assert!(sat.is_finite() && sat < 1e-12);
        let a = bce(&one(1.3), &array![[0]]).unwrap();
        let b = bce(&one(-0.4), &array![[1]]).unwrap();
        let both = bce(&array![[1.3, -0.4]], &array![[0, 1]]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
        assert!(matches!(bce(&array![[0.0, 1.0]], &array![[1]]), Err(LossError::Shape(_))));
    }

    #[test]
    fn weighted_bce_examples() {
        let z = array![[0.3, -2.0], [4.0, 0.1]];
        let y = array![[1, 0], [0, 1]];
        assert_eq!(weighted_bce(&z, &y, &[1.0, 1.0]).unwrap(), bce(&z, &y).unwrap());
        assert!((weighted_bce(&one(0.0), &array![[1]], &[3.0]).unwrap() - 3.0 * LN2).abs() < 1e-12);
        let neg = array![[0, 0], [0, 0]];
        assert_eq!(weighted_bce(&z, &neg, &[7.0, 0.2]).unwrap(), bce(&z, &neg).unwrap());
        assert!(weighted_bce(&z, &y, &[1.0]).is_err());
        assert!(weighted_bce(&z, &y, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(&one(0.0), &array![[1]], &[1.0], 2.0).unwrap() - 0.25 * LN2).abs() < 1e-12);
        let z = array![[0.7, -1.2, 3.0]];
        let y = array![[1, 1, 1]];
        assert_eq!(focal_loss(&z, &y, &[1.0; 3], 0.0).unwrap(), bce(&z, &y).unwrap());
        assert!(matches!(focal_loss(&z, &y, &[1.0, 0.0, 1.0], 2.0), Err(LossError::Config(_))));
        assert!(matches!(focal_loss(&z, &y, &[1.0, 1.5, 1.0], 2.0), Err(LossError::Config(_))));
        assert!(focal_loss(&z, &y, &[1.0; 3], -1.0).is_err());
    }

    #[test]
    fn pos_weights_from_counts() {
        let labels = LabelMatrix::new(array![[1, 1], [0, 1], [0, 0], [0, 0]], vec!["a".into(), "b".into()]);
        assert_eq!(compute_pos_weights(&labels).unwrap(), vec![3.0, 1.0]);
        let empty = LabelMatrix::new(array![[1, 0], [0, 0]], vec!["a".into(), "rare".into()]);
        assert_eq!(compute_pos_weights(&empty), Err(LossError::NoPositives("rare".into())));
    }

    #[test]
    fn alpha_rule_is_inverse_to_ap_with_mean_half() {
        let a = focal_alpha_from_ap(&[0.9, 0.5, 0.2]);
        assert!(a[0] < a[1] && a[1] < a[2]);
        assert!((a.iter().sum::<f64>() / 3.0 - 0.5).abs() < 1e-12);
        assert_eq!(focal_alpha_from_ap(&[1.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn config_restrict_and_evaluate() {
        let cfg = LossConfig { kind: LossKind::WeightedBce, pos_weights: Some(vec![1.0, 2.0, 3.0]), ..Default::default() };
        let r = cfg.restrict(&[2, 0]).unwrap();
        assert_eq!(r.pos_weights, Some(vec![3.0, 1.0]));
        assert!(cfg.restrict(&[5]).is_err());
        let (l, g) = r.evaluate(&array![[0.0, 0.0]], &array![[1, 1]]).unwrap();
        assert!((l - 2.0 * LN2).abs() < 1e-12);
        assert_eq!(g.dim(), (1, 2));
        let missing = LossConfig { kind: LossKind::WeightedBce, ..Default::default() };
        assert!(missing.evaluate(&array![[0.0]], &array![[1]]).is_err());
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_finite(z in -50.0f64..50.0, y in 0u8..2, w in 0.01f64..20.0, a in 0.01f64..1.0, g in 0.0f64..5.0) {
            let (z, y) = (one(z), array![[y]]);
            for l in [bce(&z, &y).unwrap(), weighted_bce(&z, &y, &[w]).unwrap(), focal_loss(&z, &y, &[a], g).unwrap()] {
                prop_assert!(l.is_finite() && l >= 0.0);
            }
        }

        #[test]
        fn focal_non_increasing_in_gamma(z in -10.0f64..10.0, a in 0.01f64..1.0, g in 0.0f64..4.0, dg in 0.0f64..2.0) {
            let lo = focal_loss(&one(z), &array![[1]], &[a], g).unwrap();
            let hi = focal_loss(&one(z), &array![[1]], &[a], g + dg).unwrap();
            prop_assert!(hi <= lo + 1e-15);
        }

        #[test]
        fn unit_weights_match_bce(zs in proptest::collection::vec(-50.0f64..50.0, 6), ys in proptest::collection::vec(0u8..2, 6)) {
            let z = Array2::from_shape_vec((2, 3), zs).unwrap();
            let y = Array2::from_shape_vec((2, 3), ys).unwrap();
            let (a, ga) = weighted_bce_grad(&z, &y, &[1.0; 3]).unwrap();
            let (b, gb) = bce_grad(&z, &y).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(ga, gb);
        }
    }
}
