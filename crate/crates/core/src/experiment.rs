//! Experiment configuration files: one TOML document drives a whole run,
//! so results stay diff-able. Unknown keys are rejected with their path;
//! validation aggregates every diagnostic instead of stopping at the first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::Combiner;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::scene::SceneConfig;
use crate::semi::SemiConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Train,
    Semi,
    Ensemble,
    Decoupled,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Train => "train",
            Method::Semi => "semi",
            Method::Ensemble => "ensemble",
            Method::Decoupled => "decoupled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSettings {
    pub combiner: Combiner,
    pub validation_split: f64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings { combiner: Combiner::UniformMean, validation_split: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoupledSettings {
    /// Epochs for decoupled-head training; defaults to the train epochs.
    pub epochs: Option<usize>,
}

impl Default for DecoupledSettings {
    fn default() -> Self {
        DecoupledSettings { epochs: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Fraction of all samples held out (from the unlabeled pool) as the
    /// test set.
    pub test_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { test_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub method: Method,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings { method: Method::Semi }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scene: SceneConfig,
    /// Explicit backbone; omitted means the default conv backbone sized to
    /// the scene dims.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub semi: SemiConfig,
    pub ensemble: EnsembleSettings,
    pub decoupled: DecoupledSettings,
    pub evaluation: EvalSettings,
    pub pipeline: PipelineSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scene: SceneConfig::default(),
            model: None,
            train: TrainConfig::default(),
            semi: SemiConfig::default(),
            ensemble: EnsembleSettings::default(),
            decoupled: DecoupledSettings::default(),
            evaluation: EvalSettings::default(),
            pipeline: PipelineSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("config rejected: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model input dims implied by the scene: channels are UE antennas,
    /// spatial axes are angle x delay bins.
    pub fn input_dims(&self) -> [usize; 3] {
        [self.scene.n_ue_ant, self.scene.n_bs_ports(), self.scene.n_freq_bins]
    }

    pub fn resolved_model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| {
            crate::nn::default_backbone(
                self.input_dims(),
                crate::rng::derive_seed(self.scene.seed, "model-init", &[]),
            )
        })
    }

    /// Aggregated diagnostics; empty means valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            d.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        d.extend(self.scene.diagnostics());
        d.extend(self.semi.diagnostics());
        if self.train.epochs == 0 {
            d.push("train.epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            d.push("train.batch_size must be at least 1".into());
        }
        if !(self.train.optim.lr() > 0.0) {
            d.push(format!("train.optim.lr must be positive, got {}", self.train.optim.lr()));
        }
        if self.train.augment_sigma < 0.0 {
            d.push(format!(
                "train.augment_sigma must be >= 0, got {}",
                self.train.augment_sigma
            ));
        }
        if !(0.0 < self.ensemble.validation_split && self.ensemble.validation_split < 1.0) {
            d.push(format!(
                "ensemble.validation_split must lie in (0, 1), got {}",
                self.ensemble.validation_split
            ));
        }
        if !(0.0 < self.evaluation.test_fraction && self.evaluation.test_fraction < 0.9) {
            d.push(format!(
                "evaluation.test_fraction must lie in (0, 0.9), got {}",
                self.evaluation.test_fraction
            ));
        }
        if let Some(m) = &self.model {
            if m.input_dims != self.input_dims() {
                d.push(format!(
                    "model.input_dims {:?} do not match scene dims {:?}",
                    m.input_dims,
                    self.input_dims()
                ));
            }
            if let Err(e) = m.validate() {
                d.push(format!("model: {e}"));
            }
        }
        if let Some(ep) = self.decoupled.epochs {
            if ep == 0 {
                d.push("decoupled.epochs must be at least 1".into());
            }
        }
        d
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("\n")))
        }
    }
}
