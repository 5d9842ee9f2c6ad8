use serde::{Deserialize, Serialize};

use crate::layout::{Layout, BACKGROUND};
use crate::networks::DiscOutput;
use crate::nn::FeatureExtractor;
use crate::tensor::{Element, Result, Tensor, Var};

use super::ObjectiveError;

/// Hinge margin for both real and fake branches.
pub const MARGIN: f64 = 1.0;
/// Minimum detector confidence for a box to be used as a layout instance.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the image term against the averaged object terms.
    pub lambda: f64,
    pub recon_weight: f64,
    pub perceptual_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, recon_weight: 1.0, perceptual_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), ObjectiveError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("recon_weight", self.recon_weight),
            ("perceptual_weight", self.perceptual_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ObjectiveError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `max(0, 1 − p)` for real samples, `max(0, 1 + p)` for fake ones.
pub fn hinge_term(p: f64, real: bool) -> f64 {
    if real {
        (MARGIN - p).max(0.0)
    } else {
        (MARGIN + p).max(0.0)
    }
}

/// `λ·l_img + (1/m)·Σ l_obj`; the object term vanishes when `m = 0`.
pub fn combined_adv(p_img: f64, p_obj: &[f64], lambda: f64, real: bool) -> f64 {
    let img = lambda * hinge_term(p_img, real);
    if p_obj.is_empty() {
        return img;
    }
    let sum: f64 = p_obj.iter().map(|&p| hinge_term(p, real)).sum();
    img + sum / p_obj.len() as f64
}

fn check_confidence(instance: usize, value: f64, tau: f64) -> std::result::Result<(), ObjectiveError> {
    if value >= tau && value <= 1.0 {
        Ok(())
    } else {
        Err(ObjectiveError::Confidence { instance, value, tau })
    }
}

/// `λ·l_img + (1/m)·Σ cᵢ·l_objᵢ` with detector confidences `cᵢ ∈ [τ, 1]`.
pub fn semi_weighted_adv(
    p_img: f64,
    p_obj: &[f64],
    confidences: &[f64],
    lambda: f64,
    real: bool,
    tau: f64,
) -> std::result::Result<f64, ObjectiveError> {
    if confidences.len() != p_obj.len() {
        return Err(ObjectiveError::Config(format!(
            "{} confidences for {} objects",
            confidences.len(),
            p_obj.len()
        )));
    }
    for (i, &c) in confidences.iter().enumerate() {
        check_confidence(i, c, tau)?;
    }
    let img = lambda * hinge_term(p_img, real);
    if p_obj.is_empty() {
        return Ok(img);
    }
    let sum: f64 = p_obj.iter().zip(confidences).map(|(&p, &c)| c * hinge_term(p, real)).sum();
    Ok(img + sum / p_obj.len() as f64)
}

/// Per-object weights `cᵢ/m` over the foreground instances of a batch, in
/// layout order. Without confidences every `cᵢ` is 1.
pub fn object_weights(
    layouts: &[Layout],
    confidences: Option<&[Vec<f64>]>,
    tau: f64,
) -> std::result::Result<Vec<f64>, ObjectiveError> {
    let mut out = Vec::new();
    for (n, l) in layouts.iter().enumerate() {
        let m = l.boxes.iter().filter(|b| b.label != BACKGROUND).count();
        let conf = match confidences {
            Some(c) => {
                let c = &c[n];
                if c.len() != m {
                    return Err(ObjectiveError::Config(format!("sample {n}: {} confidences for {m} objects", c.len())));
                }
                for (i, &v) in c.iter().enumerate() {
                    check_confidence(i, v, tau)?;
                }
                c.clone()
            }
            None => vec![1.0; m],
        };
        out.extend(conf.iter().map(|&c| c / m as f64));
    }
    Ok(out)
}

fn hinge<'t, T: Element>(p: &Var<'t, T>, real: bool) -> Var<'t, T> {
    if real {
        p.neg().add_scalar(MARGIN).relu()
    } else {
        p.add_scalar(MARGIN).relu()
    }
}

fn adv_sum<'t, T: Element>(
    p_img: &Var<'t, T>,
    p_obj: Option<&Var<'t, T>>,
    weights: &[f64],
    lambda: f64,
    real: bool,
) -> Result<Var<'t, T>> {
    let img = hinge(p_img, real).sum().scale(lambda);
    match p_obj {
        Some(p) => img.add(&hinge(p, real).mul_const(&Tensor::from_f64(&[weights.len()], weights)?)?.sum()),
        None => Ok(img),
    }
}

/// Hinge loss summed over a batch scored in one pass as `[real; fake]`:
/// the first `n` samples are real and the rest their fakes, with the same
/// layouts. `weights` covers one copy of the layouts.
pub fn discriminator_loss<'t, T: Element>(
    out: &DiscOutput<'t, T>,
    n: usize,
    weights: &[f64],
    lambda: f64,
) -> Result<Var<'t, T>> {
    let m = weights.len();
    let (obj_real, obj_fake) = match &out.p_obj {
        Some(p) => (Some(p.slice(0, 0, m)?), Some(p.slice(0, m, m)?)),
        None => (None, None),
    };
    let real = adv_sum(&out.p_img.slice(0, 0, n)?, obj_real.as_ref(), weights, lambda, true)?;
    let fake = adv_sum(&out.p_img.slice(0, n, n)?, obj_fake.as_ref(), weights, lambda, false)?;
    real.add(&fake)
}

/// The generator objective and its parts, each summed over the batch.
pub struct GenLossTerms<'t, T: Element> {
    pub total: Var<'t, T>,
    /// `−Σ (λ·p_img + Σ wᵢ·p_objᵢ)`.
    pub adversarial: Var<'t, T>,
    /// Per-sample mean absolute pixel error, summed.
    pub recon: Var<'t, T>,
    /// Per-sample mean absolute feature error over all extractor stages, summed.
    pub perceptual: Var<'t, T>,
}

pub fn generator_loss<'t, T: Element>(
    scores: &DiscOutput<'t, T>,
    weights: &[f64],
    synthesized: &Var<'t, T>,
    real: &Var<'t, T>,
    extractor: &FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<GenLossTerms<'t, T>> {
    let n = synthesized.shape()[0];
    let mut score = scores.p_img.sum().scale(cfg.lambda);
    if let Some(p) = &scores.p_obj {
        score = score.add(&p.mul_const(&Tensor::from_f64(&[weights.len()], weights)?)?.sum())?;
    }
    let adversarial = score.neg();

    let pixels = synthesized.value().len() / n;
    let recon = synthesized.sub(real)?.l1_norm().scale(1.0 / pixels as f64);

    let tape = synthesized.tape();
    let fs = extractor.features(tape, synthesized)?;
    let fr = extractor.features(tape, real)?;
    let mut feat_sum = None::<Var<'t, T>>;
    let mut count = 0;
    for (a, b) in fs.iter().zip(&fr) {
        count += a.value().len() / n;
        let d = a.sub(b)?.l1_norm();
        feat_sum = Some(match feat_sum {
            Some(s) => s.add(&d)?,
            None => d,
        });
    }
    let perceptual = feat_sum.expect("extractor has stages").scale(1.0 / count as f64);

    let total = adversarial
        .add(&recon.scale(cfg.recon_weight))?
        .add(&perceptual.scale(cfg.perceptual_weight))?;
    Ok(GenLossTerms { total, adversarial, recon, perceptual })
}
