//! Synthetic long-tailed multi-label dataset.
//!
//! Class `c` receives exactly `round(N · 0.5 · (c+1)^-exponent)` positives.
//! Every positive stamps a class-specific texture at a class-specific grid
//! cell onto a noisy background, so each finding is learnable from pixels.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, Gender, ImageStore, Race, Record, Split, CXR_CLASSES};
use crate::rng::{seeded, Rng};

/// Prevalence of the most frequent class.
const TOP_PREVALENCE: f64 = 0.5;
const AMPLITUDE: f64 = 0.1;
const NOISE_STD: f64 = 0.2;
/// Train/val/test proportions.
pub const SPLIT_RATIOS: [f64; 3] = [0.71, 0.08, 0.21];
const RACE_BASE: [f64; 5] = [0.60, 0.15, 0.10, 0.05, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub powerlaw_exponent: f64,
    pub label_correlation: f64,
    pub demographic_skew: f64,
    /// Mean intensity a pattern adds; each stamp draws from ±25% around it.
    pub pattern_amplitude: f64,
    /// Standard deviation of the background noise (mean 0.2).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_classes: 8,
            image_size: 64,
            powerlaw_exponent: 1.5,
            label_correlation: 0.3,
            demographic_skew: 0.3,
            pattern_amplitude: AMPLITUDE,
            noise_std: NOISE_STD,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} must be at least 2", self.num_classes));
        }
        if self.num_samples < self.num_classes {
            return bad(format!("num_samples = {} is below num_classes", self.num_samples));
        }
        if self.image_size < 16 {
            return bad(format!("image_size = {} must be at least 16", self.image_size));
        }
        if !self.powerlaw_exponent.is_finite() || self.powerlaw_exponent < 0.0 {
            return bad(format!("powerlaw_exponent = {} must be finite and non-negative", self.powerlaw_exponent));
        }
        for (name, v) in [("label_correlation", self.label_correlation), ("demographic_skew", self.demographic_skew)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.pattern_amplitude > 0.0 && self.pattern_amplitude <= 1.0) {
            return bad(format!("pattern_amplitude = {} must lie in (0, 1]", self.pattern_amplitude));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std = {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| CXR_CLASSES.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("Finding {c:02}")))
            .collect()
    }

    /// Exact positive count per class.
    pub fn target_counts(&self) -> Result<Vec<usize>, DataError> {
        let names = self.class_names();
        (0..self.num_classes)
            .map(|c| {
                let expected = self.num_samples as f64 * TOP_PREVALENCE * ((c + 1) as f64).powf(-self.powerlaw_exponent);
                let n = expected.round() as usize;
                if n == 0 {
                    Err(DataError::InfeasibleClass { class: names[c].clone(), expected })
                } else {
                    Ok(n)
                }
            })
            .collect()
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<(DatasetManifest, ImageStore), DataError> {
    config.validate()?;
    let counts = config.target_counts()?;
    let n = config.num_samples;
    let c = config.num_classes;
    let mut rng = seeded(config.seed);

    let labels = assign_labels(&counts, n, config.label_correlation, &mut rng);
    let splits = assign_splits(&labels, &counts, &mut rng);

    let mut records = Vec::with_capacity(n);
    let mut store = ImageStore::new(config.image_size);
    let noise = Normal::new(0.2, config.noise_std).expect("validated std");
    for (i, row) in labels.iter().enumerate() {
        let driving = (0..c).rev().find(|&k| row[k] == 1);
        let (race, gender) = demographics(driving, config.demographic_skew, &mut rng);
        let sample_id = format!("syn{i:06}");
        let pixels = render(row, config.image_size, config.pattern_amplitude, &noise, &mut rng);
        store.insert(sample_id.clone(), pixels)?;
        records.push(Record {
            image_ref: format!("{}{}", super::store::STORE_PREFIX, sample_id),
            sample_id,
            split: splits[i],
            race,
            gender,
            labels: row.clone(),
            provenance: None,
        });
    }
    let manifest = DatasetManifest::new(config.class_names(), records)?;
    Ok((manifest, store))
}

fn assign_labels(counts: &[usize], n: usize, correlation: f64, rng: &mut Rng) -> Vec<Vec<u8>> {
    let c = counts.len();
    let mut labels = vec![vec![0u8; c]; n];
    let mut labelled = vec![false; n];
    for (class, &target) in counts.iter().enumerate() {
        let mut any: Vec<usize> = (0..n).collect();
        any.shuffle(rng);
        let mut carriers: Vec<usize> = (0..n).filter(|&i| labelled[i]).collect();
        carriers.shuffle(rng);
        let (mut ai, mut ci) = (0usize, 0usize);
        let mut placed = 0;
        while placed < target {
            let want_carrier = rng.random::<f64>() < correlation;
            let mut pick = None;
            if want_carrier {
                while ci < carriers.len() {
                    let s = carriers[ci];
                    ci += 1;
                    if labels[s][class] == 0 {
                        pick = Some(s);
                        break;
                    }
                }
            }
            if pick.is_none() {
                while ai < any.len() {
                    let s = any[ai];
                    ai += 1;
                    if labels[s][class] == 0 {
                        pick = Some(s);
                        break;
                    }
                }
            }
            let s = pick.expect("target count never exceeds the sample count");
            labels[s][class] = 1;
            placed += 1;
        }
        for (i, row) in labels.iter().enumerate() {
            if row[class] == 1 {
                labelled[i] = true;
            }
        }
    }
    labels
}

/// Stratified split assignment: rarest classes first, each positive goes to
/// the split furthest below its share of that class.
fn assign_splits(labels: &[Vec<u8>], counts: &[usize], rng: &mut Rng) -> Vec<Split> {
    let n = labels.len();
    let mut capacity = [0usize; 3];
    capacity[1] = (n as f64 * SPLIT_RATIOS[1]).round() as usize;
    capacity[2] = (n as f64 * SPLIT_RATIOS[2]).round() as usize;
    capacity[0] = n - capacity[1] - capacity[2];
    let mut assigned: Vec<Option<usize>> = vec![None; n];

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for class in (0..counts.len()).rev() {
        let mut have = [0usize; 3];
        for (i, row) in labels.iter().enumerate() {
            if row[class] == 1 {
                if let Some(s) = assigned[i] {
                    have[s] += 1;
                }
            }
        }
        for &i in &order {
            if labels[i][class] == 0 || assigned[i].is_some() {
                continue;
            }
            let best = (0..3)
                .filter(|&s| capacity[s] > 0)
                .max_by(|&a, &b| {
                    let da = counts[class] as f64 * SPLIT_RATIOS[a] - have[a] as f64;
                    let db = counts[class] as f64 * SPLIT_RATIOS[b] - have[b] as f64;
                    da.total_cmp(&db).then(capacity[a].cmp(&capacity[b])).then(b.cmp(&a))
                })
                .expect("total capacity equals sample count");
            assigned[i] = Some(best);
            have[best] += 1;
            capacity[best] -= 1;
        }
    }
    for &i in &order {
        if assigned[i].is_none() {
            let s = (0..3).find(|&s| capacity[s] > 0).expect("capacity left");
            assigned[i] = Some(s);
            capacity[s] -= 1;
        }
    }
    assigned.into_iter().map(|s| Split::ALL[s.expect("all assigned")]).collect()
}

fn demographics(driving: Option<usize>, skew: f64, rng: &mut Rng) -> (Race, Gender) {
    let tilted = driving.filter(|_| rng.random::<f64>() < skew);
    let race = match tilted {
        Some(k) => Race::ALL[k % Race::ALL.len()],
        None => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = Race::Other;
            for (r, p) in Race::ALL.iter().zip(RACE_BASE) {
                acc += p;
                if u < acc {
                    pick = *r;
                    break;
                }
            }
            pick
        }
    };
    let gender = match tilted {
        Some(k) => Gender::ALL[k % 2],
        None => Gender::ALL[rng.random_range(0..2)],
    };
    (race, gender)
}

fn render(labels: &[u8], size: usize, amplitude: f64, noise: &Normal<f64>, rng: &mut Rng) -> Vec<f32> {
    let mut px: Vec<f64> = (0..size * size).map(|_| noise.sample(rng)).collect();
    let grid = (labels.len() as f64).sqrt().ceil() as usize;
    let cell = size as f64 / grid as f64;
    for (class, _) in labels.iter().enumerate().filter(|(_, &v)| v == 1) {
        let jitter = cell / 8.0;
        let cy = (class / grid) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
        let cx = (class % grid) as f64 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
        let radius = cell * 0.4;
        let amplitude = amplitude * (0.75 + 0.5 * rng.random::<f64>());
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(size - 1);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy.abs() > radius || dx.abs() > radius {
                    continue;
                }
                let on = match class % 4 {
                    0 => dy * dy + dx * dx <= radius * radius,
                    1 => y % 3 != 0,
                    2 => x % 3 != 0,
                    _ => ((x / 2) + (y / 2)) % 2 == 0,
                };
                if on {
                    px[y * size + x] += amplitude;
                }
            }
        }
    }
    px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::class_counts;

    fn small(exponent: f64, seed: u64) -> SynthConfig {
        SynthConfig { num_samples: 300, num_classes: 6, image_size: 16, powerlaw_exponent: exponent, seed, ..Default::default() }
    }

    fn recount(m: &DatasetManifest) -> Vec<usize> {
        // independent pass over the raw records
        let mut out = vec![0; m.num_classes()];
        for r in &m.records {
            for c in 0..m.num_classes() {
                if r.labels[c] == 1 {
                    out[c] += 1;
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_under_seed() {
        let (m1, s1) = generate_synthetic(&small(1.5, 3)).unwrap();
        let (m2, s2) = generate_synthetic(&small(1.5, 3)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        let (m3, _) = generate_synthetic(&small(1.5, 4)).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn flat_exponent_gives_equal_counts() {
        let (m, _) = generate_synthetic(&small(0.0, 1)).unwrap();
        let counts = recount(&m);
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn powerlaw_counts_are_monotone() {
        let cfg = SynthConfig { num_samples: 2000, num_classes: 8, image_size: 16, powerlaw_exponent: 1.5, ..Default::default() };
        let (m, _) = generate_synthetic(&cfg).unwrap();
        let counts = recount(&m);
        assert_eq!(counts, m.total_class_counts());
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
        let ratio = counts[0] as f64 / counts[7] as f64;
        assert!(ratio >= 8f64.powf(1.5) / 2.0, "ratio {ratio}");
    }

    #[test]
    fn splits_follow_ratios_and_cover_rare_classes() {
        let (m, _) = generate_synthetic(&SynthConfig { image_size: 16, ..Default::default() }).unwrap();
        let n = m.len() as f64;
        for (s, ratio) in Split::ALL.iter().zip(SPLIT_RATIOS) {
            let k = m.records.iter().filter(|r| r.split == *s).count() as f64;
            assert!((k / n - ratio).abs() < 0.01);
        }
        let test = class_counts(&m, Split::Test).unwrap();
        assert!(test.iter().all(|&k| k > 0), "{test:?}");
    }

    #[test]
    fn infeasible_class_is_named() {
        let cfg = SynthConfig { num_samples: 20, num_classes: 10, powerlaw_exponent: 3.0, ..Default::default() };
        match generate_synthetic(&cfg).unwrap_err() {
            DataError::InfeasibleClass { class, .. } => assert_eq!(class, CXR_CLASSES[2]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { num_classes: 1, ..Default::default() },
            SynthConfig { num_samples: 4, num_classes: 8, ..Default::default() },
            SynthConfig { image_size: 8, ..Default::default() },
            SynthConfig { label_correlation: 1.5, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(DataError::InvalidConfig(_))));
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let (_, store) = generate_synthetic(&small(1.0, 9)).unwrap();
        assert_eq!(store.len(), 300);
        assert!(store.get("syn000000").unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
