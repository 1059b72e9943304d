//! Run configuration: one TOML file of key=value settings grouped into
//! optional sections, with CLI flags taking precedence.
//!
//! Every field has a default, so an empty file (or none at all) is valid.
//! Unknown top-level keys are rejected to catch section typos.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::error::{PipelineError, Result};
use crate::model::ModelConfig;
use crate::scheduler::{PromptMode, SessionConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Seed for fresh model parameter initialization.
    pub model_seed: u64,
    pub model: ModelConfig,
    pub data: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub session: SessionSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model_seed: 1,
            model: ModelConfig::default(),
            data: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            session: SessionSection::default(),
        }
    }
}

/// Session settings as written in the file: unset fields fall back to
/// defaults, and the chunk size falls back to the model's.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_max_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_beam: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_beam: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture_wall_clock: Option<bool>,
}

impl SessionSection {
    pub fn resolve(&self, model_chunk_frames: usize) -> SessionConfig {
        let d = SessionConfig::default();
        SessionConfig {
            k: self.k.unwrap_or(d.k),
            chunk_frames: self.chunk_frames.unwrap_or(model_chunk_frames),
            l_max_ratio: self.l_max_ratio.unwrap_or(d.l_max_ratio),
            mode: PromptMode::Cif,
            text_beam: self.text_beam.unwrap_or(d.text_beam),
            unit_beam: self.unit_beam.unwrap_or(d.unit_beam),
            lm_weight: self.lm_weight.unwrap_or(d.lm_weight),
            capture_wall_clock: self.capture_wall_clock.unwrap_or(d.capture_wall_clock),
        }
    }
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Load the file if given, defaults otherwise.
    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(AppConfig::default()),
        }
    }
}
