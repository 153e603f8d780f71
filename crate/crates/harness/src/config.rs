//! Experiment configuration: a fixed JSON schema with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dnas_core::retrain::BetaSchedule;
use dnas_core::unet::UNetConfig;

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticBlobs,
    SyntheticChecker,
    RawFile,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub image_size: usize,
    pub channels: usize,
    /// Reference-set size used for evaluation (and the whole set for files).
    pub count: usize,
    pub seed: u64,
    /// Path for the raw-file source.
    #[serde(default)]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub layers_per_block: usize,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TeacherStage {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SupernetStage {
    pub steps_per_block: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub probe_batches: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SearchStage {
    /// Relaxation sweep; each value yields one searched subnet.
    pub r_values: Vec<f64>,
    /// The r whose subnet goes on to retraining and ablations.
    pub retrain_r: f64,
    pub eval_batches: usize,
    pub batch_size: usize,
    pub enumeration_cap: usize,
    pub search_middle: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Step,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RetrainStage {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub schedule: ScheduleKind,
    /// Step at which beta reaches 1 for the linear/step kinds.
    pub beta_steps: usize,
    /// Constant weight for the fixed kind.
    pub fixed_value: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddim,
    Ancestral,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    pub samples: usize,
    pub sample_batch: usize,
    pub sampler: SamplerKind,
    pub ddim_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub teacher: TeacherStage,
    pub supernet: SupernetStage,
    pub search: SearchStage,
    pub retrain: RetrainStage,
    pub eval: EvalStage,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: 16x16 single-channel synthetic blobs, a 3-level
    /// U-Net with (1,2,2) multipliers and 3 layers per block.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec {
                source: DataSource::SyntheticBlobs,
                image_size: 16,
                channels: 1,
                count: 2000,
                seed: 7,
                path: None,
            },
            model: ModelConfig {
                levels: 3,
                base_channels: 16,
                channel_mult: vec![1, 2, 2],
                layers_per_block: 3,
                time_embed_dim: 64,
            },
            // beta_end is sized so alpha_bar(T) is near zero at T = 100
            // without making the terminal x0 reconstruction ill-conditioned.
            diffusion: DiffusionConfig {
                timesteps: 100,
                beta_start: 1e-4,
                beta_end: 0.1,
            },
            teacher: TeacherStage {
                steps: 3000,
                batch_size: 32,
                lr: 2e-3,
            },
            supernet: SupernetStage {
                steps_per_block: 800,
                batch_size: 32,
                lr: 2e-3,
                probe_batches: 2,
            },
            search: SearchStage {
                r_values: vec![1.00, 1.02, 1.05, 1.10],
                retrain_r: 1.02,
                eval_batches: 4,
                batch_size: 32,
                enumeration_cap: 6561,
                search_middle: true,
            },
            retrain: RetrainStage {
                total_steps: 3000,
                batch_size: 32,
                lr: 2e-3,
                gamma: 1.0,
                schedule: ScheduleKind::Step,
                beta_steps: 750,
                fixed_value: 0.5,
                log_every: 50,
            },
            eval: EvalStage {
                samples: 2000,
                sample_batch: 32,
                sampler: SamplerKind::Ddim,
                ddim_steps: 50,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.model.levels,
            base_channels: self.model.base_channels,
            channel_mult: self.model.channel_mult.clone(),
            layers_per_block: self.model.layers_per_block,
            image_size: self.dataset.image_size,
            image_channels: self.dataset.channels,
            time_embed_dim: self.model.time_embed_dim,
        }
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        match self.retrain.schedule {
            ScheduleKind::Linear => BetaSchedule::Linear {
                beta_steps: self.retrain.beta_steps,
            },
            ScheduleKind::Step => BetaSchedule::Step {
                beta_steps: self.retrain.beta_steps,
            },
            ScheduleKind::Fixed => BetaSchedule::Fixed {
                value: self.retrain.fixed_value,
            },
        }
    }

    pub fn validate(&self) -> Result<Self> {
        self.unet_config()
            .validate()
            .map_err(HarnessError::from)?;
        if self.dataset.count < 2 {
            return Err(HarnessError::Config(
                "dataset count must be at least 2".into(),
            ));
        }
        if matches!(self.dataset.source, DataSource::RawFile) && self.dataset.path.is_none() {
            return Err(HarnessError::Config(
                "raw-file dataset needs a path".into(),
            ));
        }
        for &r in &self.search.r_values {
            if r < 1.0 {
                return Err(HarnessError::Config(format!(
                    "relaxation value {r} below 1"
                )));
            }
        }
        if !self
            .search
            .r_values
            .iter()
            .any(|&r| (r - self.search.retrain_r).abs() < 1e-12)
        {
            return Err(HarnessError::Config(format!(
                "retrain_r {} is not part of the r sweep",
                self.search.retrain_r
            )));
        }
        if self.eval.samples < 2 {
            return Err(HarnessError::Config("eval needs at least 2 samples".into()));
        }
        if self.eval.ddim_steps == 0 || self.eval.ddim_steps > self.diffusion.timesteps {
            return Err(HarnessError::Config(format!(
                "ddim steps {} outside [1, {}]",
                self.eval.ddim_steps, self.diffusion.timesteps
            )));
        }
        Ok(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(ExperimentConfig::default()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }
}
