//! Simulated detector output and the supervised/unlabeled split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::layout::{LabeledBox, Layout, NormBox};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Standard deviation of each box edge, in image fractions.
    pub jitter_sigma: f64,
    pub drop_prob: f64,
    /// Confidence loss per unit of jitter.
    pub kappa: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { jitter_sigma: 0.0, drop_prob: 0.0, kappa: 2.0 }
    }
}

/// Perturbs each ground-truth box as a detector would and attaches a
/// confidence `clip(1 − κ·max|edge shift|, τ, 1)`. Dropped boxes vanish.
pub fn simulate_detections(layout: &Layout, noise: &NoiseConfig, seed: u64, tau: f64) -> Layout {
    let mut rng = rng::stream(seed);
    let (h, w) = layout.lattice;
    let (min_w, min_h) = (1.0 / w.max(1) as f64, 1.0 / h.max(1) as f64);
    let mut boxes = Vec::with_capacity(layout.boxes.len());
    for b in &layout.boxes {
        let drop: f64 = rng.random();
        let shifts: [f64; 4] = std::array::from_fn(|_| noise.jitter_sigma * rng.sample::<f64, _>(StandardNormal));
        if drop < noise.drop_prob {
            continue;
        }
        let g = &b.bbox;
        let x0 = (g.x0 + shifts[0]).clamp(0.0, 1.0 - min_w);
        let y0 = (g.y0 + shifts[1]).clamp(0.0, 1.0 - min_h);
        let x1 = (g.x1 + shifts[2]).clamp(x0 + min_w, 1.0);
        let y1 = (g.y1 + shifts[3]).clamp(y0 + min_h, 1.0);
        let magnitude = shifts.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let confidence = (1.0 - noise.kappa * magnitude).clamp(tau, 1.0);
        boxes.push(LabeledBox { label: b.label, bbox: NormBox::new(x0, y0, x1, y1), confidence: Some(confidence) });
    }
    Layout::new(layout.lattice, boxes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// Layout annotations are kept.
    Supervised,
    /// Layout annotations are discarded and replaced by detections.
    Unlabeled,
}

/// Random disjoint split with `round(n·supervised_fraction)` supervised
/// samples.
pub fn split(n: usize, supervised_fraction: f64, seed: u64) -> Vec<SplitTag> {
    let k = (n as f64 * supervised_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let mut tags = vec![SplitTag::Unlabeled; n];
    for &i in &order[..k] {
        tags[i] = SplitTag::Supervised;
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{CategorySet, DEFAULT_MAX_BOXES};

    fn layout() -> Layout {
        Layout::new(
            (32, 32),
            vec![
                LabeledBox::new(1, NormBox::new(0.1, 0.2, 0.5, 0.6)),
                LabeledBox::new(3, NormBox::new(0.0, 0.5, 1.0, 1.0)),
                LabeledBox::new(2, NormBox::new(0.7, 0.0, 0.8, 0.1)),
            ],
        )
    }

    #[test]
    fn zero_noise_is_the_identity_with_full_confidence() {
        let l = layout();
        let d = simulate_detections(&l, &NoiseConfig::default(), 3, 0.5);
        assert_eq!(d.boxes.len(), 3);
        for (a, b) in l.boxes.iter().zip(&d.boxes) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.label, b.label);
            assert_eq!(b.confidence, Some(1.0));
        }
    }

    #[test]
    fn certain_drop_gives_an_empty_valid_layout() {
        let d = simulate_detections(&layout(), &NoiseConfig { drop_prob: 1.0, ..Default::default() }, 3, 0.5);
        assert!(d.boxes.is_empty());
        assert!(d.validate(&CategorySet::shapes(), DEFAULT_MAX_BOXES).is_ok());
    }

    #[test]
    fn jittered_boxes_stay_valid_and_confident_enough() {
        let noise = NoiseConfig { jitter_sigma: 0.05, ..Default::default() };
        for seed in 0..200 {
            let d = simulate_detections(&layout(), &noise, seed, 0.5);
            assert!(d.validate(&CategorySet::shapes(), DEFAULT_MAX_BOXES).is_ok(), "seed {seed}");
            for b in &d.boxes {
                let p = b.confidence.unwrap();
                assert!((0.5..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn split_is_even_disjoint_and_deterministic() {
        let s = split(64, 0.5, 7);
        assert_eq!(s.iter().filter(|&&t| t == SplitTag::Supervised).count(), 32);
        assert_eq!(s, split(64, 0.5, 7));
        assert_ne!(s, split(64, 0.5, 8));
        assert!(split(10, 1.0, 1).iter().all(|&t| t == SplitTag::Supervised));
        assert!(split(10, 0.0, 1).iter().all(|&t| t == SplitTag::Unlabeled));
    }
}
