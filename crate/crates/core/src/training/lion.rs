use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LionHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Momentum buffers in the same container type as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<P> {
    pub momentum: P,
    pub steps: u64,
}

impl<P: Parameters + Clone> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        let mut momentum = params.clone();
        momentum.fill(0.0);
        Self { momentum, steps: 0 }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One Lion update on flat buffers:
///
/// ```text
/// u  = sign(β1·m + (1 − β1)·g)
/// θ ← θ − lr·(u + wd·θ)
/// m ← β2·m + (1 − β2)·g
/// ```
pub fn lion_step(params: &mut [f64], grads: &[f64], momentum: &mut [f64], hp: &LionHyper) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(TrainError::Shape(format!(
            "lion_step: {} params, {} grads, {} momentum",
            params.len(),
            grads.len(),
            momentum.len()
        )));
    }
    for ((p, &g), m) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let u = sign(hp.beta1 * *m + (1.0 - hp.beta1) * g);
        *p -= hp.lr * (u + hp.weight_decay * *p);
        *m = hp.beta2 * *m + (1.0 - hp.beta2) * g;
    }
    Ok(())
}

/// Applies [`lion_step`] tensor by tensor, skipping tensors whose name
/// satisfies `frozen`.
pub fn lion_update<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    hp: &LionHyper,
    frozen: impl Fn(&str) -> bool,
) -> Result<(), TrainError> {
    let g = grads.tensors();
    let m = state.momentum.tensors_mut();
    let p = params.tensors_mut();
    if p.len() != g.len() || p.len() != m.len() {
        return Err(TrainError::Shape("parameter, gradient and momentum containers differ".into()));
    }
    for ((name, pt), ((gname, _, gt), (_, mt))) in p.into_iter().zip(g.into_iter().zip(m)) {
        if name != gname {
            return Err(TrainError::Shape(format!("tensor order mismatch: `{name}` vs `{gname}`")));
        }
        if frozen(&name) {
            continue;
        }
        lion_step(pt, gt, mt, hp)?;
    }
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HP: LionHyper = LionHyper { lr: 0.1, weight_decay: 0.0, beta1: 0.9, beta2: 0.99 };

    #[test]
    fn hand_computed_update() {
        let (mut p, mut m) = ([1.0], [0.0]);
        lion_step(&mut p, &[0.5], &mut m, &HP).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert!((m[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point_and_decay_is_decoupled() {
        let (mut p, mut m) = ([2.0, -3.0], [0.0, 0.0]);
        lion_step(&mut p, &[0.0, 0.0], &mut m, &HP).unwrap();
        assert_eq!(p, [2.0, -3.0]);
        let hp = LionHyper { weight_decay: 0.5, ..HP };
        lion_step(&mut p, &[0.0, 0.0], &mut m, &hp).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15 && (p[1] + 3.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!(lion_step(&mut p, &[0.0], &mut m, &hp).is_err());
    }

    proptest! {
        #[test]
        fn moves_by_exactly_lr_or_zero(
            v in proptest::collection::vec((-5.0f64..5.0, -1.0f64..1.0, -1.0f64..1.0), 1..50),
            lr in 1e-4f64..1.0,
        ) {
            let mut p: Vec<f64> = v.iter().map(|t| t.0).collect();
            let g: Vec<f64> = v.iter().map(|t| t.1).collect();
            let mut m: Vec<f64> = v.iter().map(|t| t.2).collect();
            let before = p.clone();
            let m0 = m.clone();
            lion_step(&mut p, &g, &mut m, &LionHyper { lr, ..HP }).unwrap();
            for i in 0..p.len() {
                let expect = sign(0.9 * m0[i] + 0.1 * g[i]);
                prop_assert_eq!(p[i], before[i] - lr * expect);
            }
        }
    }
}
