use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::layout::{sample_styles, CategorySet, Layout, StyleCodes};
use crate::networks::{
    discriminator_forward, generator_forward, Discriminator, DiscriminatorConfig, GenOptions, Generator,
    GeneratorConfig,
};
use crate::nn::{Ctx, FeatureExtractor, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

use super::checkpoint::{Checkpoint, CheckpointError};
use super::losses::{discriminator_loss, generator_loss, object_weights, LossConfig, DEFAULT_TAU};
use super::{Adam, AdamConfig, ObjectiveError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Detector confidence threshold for semi-supervised layouts.
    pub tau: f64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            batch_size: 8,
            tau: DEFAULT_TAU,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every layout instance is ground truth.
    Fully,
    /// Object terms are re-weighted by per-instance detector confidences.
    Semi,
}

/// One mini-batch: images in `[−1, 1]` and their layouts with background.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub layouts: Vec<Layout>,
    /// Per sample, one confidence per foreground instance. `None` means all
    /// instances are annotated.
    pub confidences: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_adv: f64,
    /// Mean absolute pixel error per sample, averaged over the batch.
    pub recon: f64,
    /// Mean absolute feature error per sample, averaged over the batch.
    pub percep: f64,
    pub p_img_real: f64,
    pub p_img_fake: f64,
    pub p_obj_real: f64,
    pub p_obj_fake: f64,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Both networks, their optimizers and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub categories: CategorySet,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub extractor: FeatureExtractor<f32>,
    pub step: u64,
}

fn mean(values: &[f32]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
    }
}

fn finite_check(tape: &Tape<f32>, phase: &'static str) -> Result<(), ObjectiveError> {
    match tape.first_non_finite() {
        Some((node, op)) => Err(ObjectiveError::NonFinite { phase, op, node }),
        None => Ok(()),
    }
}

fn backward(tape: &Tape<f32>, loss: Var<'_, f32>, phase: &'static str) -> Result<(), ObjectiveError> {
    finite_check(tape, phase)?;
    tape.backward(loss).map_err(|e| match e {
        TensorError::NonFinite { op, node } => ObjectiveError::NonFinite { phase, op, node },
        e => e.into(),
    })
}

impl Trainer {
    pub fn new(config: TrainerConfig, categories: CategorySet) -> Result<Self, ObjectiveError> {
        config.loss.validate()?;
        if config.generator.resolution != config.discriminator.resolution {
            return Err(ObjectiveError::Config(format!(
                "generator resolution {} differs from discriminator resolution {}",
                config.generator.resolution, config.discriminator.resolution
            )));
        }
        let d = categories.len();
        let generator = Generator::new(config.generator.clone(), d, rng::split(config.seed, 1))?;
        let discriminator = Discriminator::new(config.discriminator.clone(), d, rng::split(config.seed, 2))?;
        Ok(Trainer {
            opt_g: Adam::new(config.adam.clone(), &generator.params),
            opt_d: Adam::new(config.adam.clone(), &discriminator.params),
            config,
            categories,
            generator,
            discriminator,
            extractor: FeatureExtractor::new(),
            step: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.config.generator.resolution
    }

    /// Style codes used for the fakes of the current step.
    pub fn step_styles(&self, layouts: &[Layout]) -> Vec<StyleCodes> {
        let step_seed = rng::split(rng::split(self.config.seed, 3), self.step);
        let g = &self.config.generator;
        layouts
            .iter()
            .enumerate()
            .map(|(n, l)| sample_styles(l, g.d_img, g.d_obj, rng::split(step_seed, n as u64)))
            .collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch, mode: TrainMode) -> Result<StepMetrics, ObjectiveError> {
        let n = batch.layouts.len();
        let r = self.resolution();
        if batch.images.shape() != [n, 3, r, r] {
            return Err(ObjectiveError::Config(format!(
                "batch of {n} layouts needs images of shape [{n}, 3, {r}, {r}], got {:?}",
                batch.images.shape()
            )));
        }
        let confidences = match mode {
            TrainMode::Semi => batch.confidences.as_deref(),
            TrainMode::Fully => None,
        };
        let weights = object_weights(&batch.layouts, confidences, self.config.tau)?;
        let styles = self.step_styles(&batch.layouts);
        let lambda = self.config.loss.lambda;
        let opts = GenOptions::default();

        self.generator.params.refresh_spectral_exact();
        self.discriminator.params.refresh_spectral_exact();
        let (d_loss, p_img, p_obj, m) = {
            let tape = Tape::new();
            let gctx = Ctx::new(&tape, &self.generator.params, false);
            let fake = generator_forward(&gctx, &self.generator.config, &batch.layouts, &styles, &opts)?.image.detach();
            let real = tape.constant(batch.images.clone());
            let both = Var::concat(&[real, fake], 0)?;
            let layouts: Vec<Layout> = batch.layouts.iter().chain(&batch.layouts).cloned().collect();
            let dctx = Ctx::new(&tape, &self.discriminator.params, true);
            let out = discriminator_forward(&dctx, &self.discriminator.config, &both, &layouts)?;
            let loss = discriminator_loss(&out, n, &weights, lambda)?;
            backward(&tape, loss, "discriminator")?;
            let grads = dctx.gradients();
            drop(dctx);
            self.opt_d.update(&mut self.discriminator.params, &grads)?;
            let p_obj = out.p_obj.map(|p| p.value().data().to_vec()).unwrap_or_default();
            (loss.value().item() as f64, out.p_img.value().data().to_vec(), p_obj, weights.len())
        };

        self.discriminator.params.refresh_spectral_exact();
        let tape = Tape::new();
        let gctx = Ctx::new(&tape, &self.generator.params, true);
        let dctx = Ctx::new(&tape, &self.discriminator.params, false);
        let out = generator_forward(&gctx, &self.generator.config, &batch.layouts, &styles, &opts)?;
        let scores = discriminator_forward(&dctx, &self.discriminator.config, &out.image, &batch.layouts)?;
        let real = tape.constant(batch.images.clone());
        let terms = generator_loss(&scores, &weights, &out.image, &real, &self.extractor, &self.config.loss)?;
        backward(&tape, terms.total, "generator")?;
        let grads = gctx.gradients();
        drop(gctx);
        self.opt_g.update(&mut self.generator.params, &grads)?;

        let metrics = StepMetrics {
            step: self.step,
            d_loss,
            g_loss: terms.total.value().item() as f64,
            g_adv: terms.adversarial.value().item() as f64,
            recon: terms.recon.value().item() as f64 / n as f64,
            percep: terms.perceptual.value().item() as f64 / n as f64,
            p_img_real: mean(&p_img[..n]),
            p_img_fake: mean(&p_img[n..]),
            p_obj_real: mean(&p_obj[..m.min(p_obj.len())]),
            p_obj_fake: mean(&p_obj[m.min(p_obj.len())..]),
        };
        self.step += 1;
        Ok(metrics)
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for store in [&self.generator.params, &self.discriminator.params] {
            for name in store.names() {
                names.push(name.clone());
                names.push(format!("adam.m.{name}"));
                names.push(format!("adam.v.{name}"));
            }
            for name in store.spectral().keys() {
                names.push(format!("sn.u.{name}"));
                names.push(format!("sn.v.{name}"));
            }
        }
        names
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (store, opt) in [(&self.generator.params, &self.opt_g), (&self.discriminator.params, &self.opt_d)] {
            for (name, t) in store.iter() {
                tensors.insert(name.clone(), t.clone());
                tensors.insert(format!("adam.m.{name}"), opt.m[name].clone());
                tensors.insert(format!("adam.v.{name}"), opt.v[name].clone());
            }
            for (name, s) in store.spectral() {
                let vec = |x: &[f32]| Tensor::new(&[x.len()], x.to_vec()).expect("1-D");
                tensors.insert(format!("sn.u.{name}"), vec(&s.u));
                tensors.insert(format!("sn.v.{name}"), vec(&s.v));
            }
        }
        let meta = serde_json::json!({
            "format": "isla-checkpoint",
            "step": self.step,
            "adam_steps": {"generator": self.opt_g.step, "discriminator": self.opt_d.step},
            "rng": {"seed": self.config.seed, "step": self.step},
            "categories": self.categories,
            "config": self.config,
        });
        Checkpoint { tensors, meta }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ObjectiveError> {
        let field = |key: &str| {
            ckpt.meta.get(key).cloned().ok_or_else(|| CheckpointError::Format(format!("metadata lacks `{key}`")))
        };
        let parse = |key: &str| -> Result<serde_json::Value, CheckpointError> { field(key) };
        let bad = |e: serde_json::Error| CheckpointError::Format(format!("metadata: {e}"));
        let config: TrainerConfig = serde_json::from_value(parse("config")?).map_err(bad)?;
        let categories: CategorySet = serde_json::from_value(parse("categories")?).map_err(bad)?;
        let step: u64 = serde_json::from_value(parse("step")?).map_err(bad)?;
        let adam_steps = parse("adam_steps")?;
        let adam_step = |k: &str| -> Result<u64, CheckpointError> {
            serde_json::from_value(adam_steps.get(k).cloned().unwrap_or_default()).map_err(bad)
        };

        let mut t = Trainer::new(config, categories)?;
        let names = t.tensor_names();
        ckpt.expect_names(names.iter().map(String::as_str))?;
        let take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
            let v = &ckpt.tensors[name];
            if v.shape() != shape {
                return Err(CheckpointError::Format(format!("`{name}` has shape {:?}, expected {shape:?}", v.shape())));
            }
            Ok(v.clone())
        };
        let restore = |store: &mut ParamStore<f32>, opt: &mut Adam<f32>| -> Result<(), CheckpointError> {
            let names: Vec<String> = store.names().cloned().collect();
            for name in &names {
                let shape = store.get(name).expect("listed").shape().to_vec();
                store.insert(name, take(name, &shape)?);
                opt.m.insert(name.clone(), take(&format!("adam.m.{name}"), &shape)?);
                opt.v.insert(name.clone(), take(&format!("adam.v.{name}"), &shape)?);
            }
            for (name, s) in store.spectral_mut().iter_mut() {
                s.u = take(&format!("sn.u.{name}"), &[s.u.len()])?.into_data();
                s.v = take(&format!("sn.v.{name}"), &[s.v.len()])?.into_data();
            }
            Ok(())
        };
        restore(&mut t.generator.params, &mut t.opt_g)?;
        restore(&mut t.discriminator.params, &mut t.opt_d)?;
        t.opt_g.step = adam_step("generator")?;
        t.opt_d.step = adam_step("discriminator")?;
        t.step = step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{LabeledBox, NormBox};

    fn tiny_config() -> TrainerConfig {
        TrainerConfig {
            seed: 5,
            batch_size: 2,
            generator: GeneratorConfig {
                resolution: 16,
                channels: vec![8, 8, 4],
                d_img: 8,
                d_embed: 8,
                d_obj: 8,
                mask_size: 8,
                mask_channels: 4,
            },
            discriminator: DiscriminatorConfig { resolution: 16, channels: vec![4, 8, 8], obj_channels: 8, roi_size: 2 },
            ..Default::default()
        }
    }

    fn batch() -> Batch {
        let mk = |boxes: &[(usize, [f64; 4])]| {
            let b = boxes.iter().map(|&(l, b)| LabeledBox::new(l, NormBox::new(b[0], b[1], b[2], b[3]))).collect();
            Layout::new((16, 16), b).with_background().unwrap()
        };
        let layouts = vec![mk(&[(1, [0.1, 0.1, 0.6, 0.6]), (2, [0.5, 0.4, 0.9, 0.95])]), mk(&[(4, [0.2, 0.3, 0.8, 0.7])])];
        let images = Tensor::from_fn(&[2, 3, 16, 16], |i| (((i * 7) % 13) as f32 / 6.5 - 1.0) * 0.8);
        Batch { images, layouts, confidences: Some(vec![vec![1.0, 1.0], vec![1.0]]) }
    }

    #[test]
    fn training_is_deterministic_and_semi_with_unit_confidence_matches_full() {
        let mut a = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        let b0 = batch();
        for _ in 0..2 {
            let ma = a.train_step(&b0, TrainMode::Fully).unwrap();
            let mb = b.train_step(&b0, TrainMode::Fully).unwrap();
            let mc = c.train_step(&b0, TrainMode::Semi).unwrap();
            assert_eq!(ma, mb);
            assert_eq!(ma, mc);
        }
        assert_eq!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    }

    #[test]
    fn generator_update_reaches_conditioning_parameters() {
        let mut t = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        let before = t.generator.params.clone();
        t.train_step(&batch(), TrainMode::Fully).unwrap();
        for name in ["gen.embed", "gen.isla.0.norm1.proj.w", "gen.isla.1.norm2.proj.w", "gen.mask.fc.w"] {
            assert_ne!(before.get(name), t.generator.params.get(name), "{name} did not move");
        }
    }

    #[test]
    fn low_confidence_is_rejected_in_semi_mode_only() {
        let mut t = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        let mut b = batch();
        b.confidences = Some(vec![vec![0.3, 1.0], vec![0.9]]);
        assert!(matches!(t.train_step(&b, TrainMode::Semi), Err(ObjectiveError::Confidence { .. })));
        t.train_step(&b, TrainMode::Fully).unwrap();
    }

    #[test]
    fn resuming_from_a_checkpoint_continues_identically() {
        let mut a = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        a.train_step(&batch(), TrainMode::Fully).unwrap();
        let bytes = a.to_checkpoint().to_bytes();
        let mut b = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(b.to_checkpoint().to_bytes(), bytes);
        let ma = a.train_step(&batch(), TrainMode::Fully).unwrap();
        let mb = b.train_step(&batch(), TrainMode::Fully).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    }

    #[test]
    fn checkpoint_for_another_model_is_a_name_mismatch() {
        let a = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        let mut ckpt = a.to_checkpoint();
        ckpt.tensors.remove("gen.rgb.b");
        ckpt.tensors.insert("gen.extra".into(), Tensor::zeros(&[1]));
        match Trainer::from_checkpoint(&ckpt) {
            Err(ObjectiveError::Checkpoint(CheckpointError::NameMismatch { missing, unexpected })) => {
                assert_eq!(missing, vec!["gen.rgb.b"]);
                assert_eq!(unexpected, vec!["gen.extra"]);
            }
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted"),
        }
    }

    #[test]
    fn non_finite_input_names_the_first_bad_op() {
        let mut t = Trainer::new(tiny_config(), CategorySet::shapes()).unwrap();
        let mut b = batch();
        b.images.data_mut()[0] = f32::NAN;
        match t.train_step(&b, TrainMode::Fully) {
            Err(ObjectiveError::NonFinite { phase, op, .. }) => {
                assert_eq!(phase, "discriminator");
                assert!(!op.is_empty());
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
