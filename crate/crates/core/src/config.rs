//! The declarative run configuration: one TOML file with sections
//! mirroring the phantom, pipeline, model, training and synthesis
//! settings. Every field is defaulted and unknown keys are rejected with
//! the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomParams;
use crate::train::TrainConfig;

/// Synthesis-time settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seed for the random style vector.
    pub seed: u64,
    /// Share one style vector across the whole 4D sequence (the default)
    /// or draw a fresh one per slice.
    pub shared_style: bool,
    /// Resample phantom labels to the training in-plane spacing before
    /// cropping, instead of cropping/padding the native grid.
    pub resample_to_training: bool,
    /// Slices generated per generator invocation.
    pub batch_slices: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            shared_style: true,
            resample_to_training: false,
            batch_slices: 8,
        }
    }
}

/// Top-level configuration with one section per subsystem.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomParams,
    pub data: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parse and validate. Parse errors name the offending key and line.
    pub fn parse_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.into()))?;
        Self::parse_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Serialized form written beside every command's outputs, so any run
    /// is reproducible from the snapshot plus its inputs.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let dir = out_dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.to_toml())?;
        Ok(())
    }
}
