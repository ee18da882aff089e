//! Run configuration files.
//!
//! JSON, schema-validated before any compute starts: unknown keys and type
//! mismatches are rejected at parse time, value constraints right after.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, ModelConfig};
use crate::sample::VarianceKind;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::train::TrainParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Foster,
    Assemble,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Base => "base",
            Stage::Foster => "foster",
            Stage::Assemble => "assemble",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_beta_min() -> f64 {
    1e-4
}
fn default_beta_max() -> f64 {
    2e-2
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::make(self.timesteps, self.kind, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Base,
    Foster,
    Assembled,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    pub mode: SampleMode,
    /// Bank scale used in foster mode; defaults to the finest scale.
    #[serde(default)]
    pub foster_scale: Option<usize>,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            count: 1000,
            mode: SampleMode::Base,
            foster_scale: None,
            variance: VarianceKind::Posterior,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_intervals")]
    pub intervals: usize,
    #[serde(default = "default_samples_per_interval")]
    pub samples_per_interval: usize,
    #[serde(default = "default_generated")]
    pub generated: usize,
    #[serde(default = "default_drift_layer")]
    pub drift_layer: usize,
    #[serde(default = "default_drift_probes")]
    pub drift_probes: usize,
}

fn default_eval_intervals() -> usize {
    8
}
fn default_samples_per_interval() -> usize {
    200
}
fn default_generated() -> usize {
    1000
}
fn default_drift_layer() -> usize {
    2
}
fn default_drift_probes() -> usize {
    64
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            intervals: default_eval_intervals(),
            samples_per_interval: default_samples_per_interval(),
            generated: default_generated(),
            drift_layer: default_drift_layer(),
            drift_probes: default_drift_probes(),
        }
    }
}

/// The complete run configuration consumed by every CLI command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub adapters: Option<AdapterConfig>,
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage: Stage,
    #[serde(flatten)]
    pub params: TrainParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.train.params.validate()?;
        self.schedule.build()?;
        if self.model.data_dim != self.dataset.dim() {
            return Err(Error::Config(format!(
                "model data_dim {} does not match dataset dim {}",
                self.model.data_dim,
                self.dataset.dim()
            )));
        }
        if let Some(classes) = self.model.num_classes {
            if classes != self.dataset.num_classes() {
                return Err(Error::Config(format!(
                    "model num_classes {} does not match dataset classes {}",
                    classes,
                    self.dataset.num_classes()
                )));
            }
        }
        if let Some(adapters) = &self.adapters {
            if adapters.rank == 0 || adapters.alpha <= 0.0 {
                return Err(Error::Config(
                    "adapter rank and alpha must be positive".into(),
                ));
            }
            for &scale in adapters.scales.scales() {
                if scale > self.schedule.timesteps {
                    return Err(Error::Config(format!(
                        "adapter scale n={scale} exceeds timesteps {}",
                        self.schedule.timesteps
                    )));
                }
            }
        }
        match self.train.stage {
            Stage::Base => {}
            Stage::Foster | Stage::Assemble => {
                if self.adapters.is_none() {
                    return Err(Error::Config(format!(
                        "stage {} needs an adapters section",
                        self.train.stage
                    )));
                }
            }
        }
        if self.sample.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if let Some(scale) = self.sample.foster_scale {
            match &self.adapters {
                Some(a) if a.scales.contains(scale) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "foster_scale {scale} is not one of the configured scales"
                    )))
                }
            }
        }
        if self.eval.intervals == 0
            || self.eval.intervals > self.schedule.timesteps
            || self.eval.samples_per_interval == 0
            || self.eval.generated == 0
            || self.eval.drift_probes == 0
        {
            return Err(Error::Config("eval section values must be positive".into()));
        }
        Ok(())
    }
}
