//! Run configuration and the training loop shared by the CLI and the
//! acceptance suite.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, split, DataError, Dataset, DatasetConfig, NoiseConfig, SemiSetup};
use crate::objectives::{save_checkpoint, Checkpoint, CheckpointError, ObjectiveError, StepMetrics, TrainMode, Trainer, TrainerConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples: usize,
    pub seed: u64,
    pub render: DatasetConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { samples: 64, seed: 0, render: DatasetConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSection {
    /// Fraction of samples that keep their annotations.
    pub supervised_fraction: f64,
    pub noise: NoiseConfig,
}

impl Default for SemiSection {
    fn default() -> Self {
        SemiSection { supervised_fraction: 0.5, noise: NoiseConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 2000, checkpoint_every: 500 }
    }
}

/// Everything a run depends on. Echoed into checkpoints and reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub trainer: TrainerConfig,
    pub semi: SemiSection,
    pub schedule: ScheduleSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.data.render.validate()?;
        if self.data.samples == 0 {
            return Err("data.samples must be at least 1".into());
        }
        if self.data.render.resolution != self.trainer.generator.resolution
            || self.trainer.generator.resolution != self.trainer.discriminator.resolution
        {
            return Err(format!(
                "resolution mismatch: data {}, generator {}, discriminator {}",
                self.data.render.resolution, self.trainer.generator.resolution, self.trainer.discriminator.resolution
            ));
        }
        if !(0.0..=1.0).contains(&self.semi.supervised_fraction) {
            return Err("semi.supervised_fraction must lie in [0, 1]".into());
        }
        if self.trainer.batch_size == 0 {
            return Err("trainer.batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// Same run with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.trainer.seed = seed;
        self.data.seed = rng::split(seed, 10);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The semi-supervised view of `dataset`: a deterministic split, with
/// unlabeled samples replaced by simulated detections.
pub fn semi_setup(dataset: &mut Dataset, cfg: &RunConfig) -> SemiSetup {
    let seed = rng::split(cfg.trainer.seed, 4);
    dataset.splits = split(dataset.len(), cfg.semi.supervised_fraction, rng::split(seed, 0));
    SemiSetup { noise: cfg.semi.noise.clone(), tau: cfg.trainer.tau, seed: rng::split(seed, 1) }
}

/// Trainer checkpoint with the run configuration echoed into its metadata.
pub fn run_checkpoint(trainer: &Trainer, cfg: &RunConfig) -> Checkpoint {
    let mut ckpt = trainer.to_checkpoint();
    ckpt.meta["run"] = serde_json::to_value(cfg).expect("run config serializes");
    ckpt
}

pub struct RunOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<StepMetrics>,
}

/// Trains `trainer` on `dataset` until it has taken `steps` steps in total.
/// Each step's metrics are handed to `on_step`; checkpoints are written to
/// `out` at the configured cadence and at the end.
pub fn train(
    mut trainer: Trainer,
    dataset: &Dataset,
    cfg: &RunConfig,
    semi: Option<&SemiSetup>,
    steps: u64,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunOutcome, PipelineError> {
    if dataset.resolution() != trainer.resolution() {
        return Err(PipelineError::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            dataset.resolution(),
            trainer.resolution()
        )));
    }
    let layouts = dataset.training_layouts(semi);
    let mode = if semi.is_some() { TrainMode::Semi } else { TrainMode::Fully };
    let shuffle_seed = rng::split(trainer.config.seed, 5);
    let mut metrics = Vec::new();
    while trainer.step < steps {
        let idx = batch_indices(dataset.len(), trainer.config.batch_size, trainer.step, shuffle_seed);
        let batch = dataset.batch(&idx, &layouts)?;
        let m = trainer.train_step(&batch, mode)?;
        on_step(&m);
        metrics.push(m);
        if let Some(dir) = out {
            let every = cfg.schedule.checkpoint_every;
            if every > 0 && trainer.step % every == 0 {
                save_checkpoint(&dir.join(format!("step_{:06}.ckpt", trainer.step)), &run_checkpoint(&trainer, cfg))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final.ckpt"), &run_checkpoint(&trainer, cfg))?;
    }
    Ok(RunOutcome { trainer, metrics })
}

/// Writes one JSON line per step.
pub fn write_metrics(w: &mut impl Write, m: &StepMetrics) -> std::io::Result<()> {
    writeln!(w, "{}", m.to_json_line())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("lambda"));
    }

    #[test]
    fn partial_config_fills_defaults_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml("[schedule]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.schedule.steps, 7);
        assert_eq!(cfg.trainer, TrainerConfig::default());
        assert!(RunConfig::from_toml("[schedule]\nstep = 7\n").is_err());
    }

    #[test]
    fn resolution_mismatch_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.data.render.resolution = 16;
        assert!(cfg.validate().unwrap_err().contains("resolution"));
    }
}
