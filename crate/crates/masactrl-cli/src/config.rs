//! Run configuration files: versioned, human-readable TOML. A persisted
//! `RunConfig` plus a checkpoint is enough to bit-reproduce any run.

use serde::{Deserialize, Serialize};
use std::path::Path;

use masactrl::denoiser::DenoiserConfig;
use masactrl::schedule::ScheduleParams;
use masactrl::toy::TokenGrammar;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_model")]
    pub model: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub seeds: SeedSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// The grammar fixes vocabulary and prompt length; the model defaults
/// follow it.
fn default_model() -> DenoiserConfig {
    let g = TokenGrammar;
    DenoiserConfig {
        vocab_size: g.vocab_size(),
        max_tokens: g.max_tokens(),
        ..Default::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: 50,
            guidance_scale: 7.5,
        }
    }
}

/// Mirrors `ControlConfig`, with optional gate fields: when absent, the
/// start step stays at the method default (4) and the start layer resolves
/// to the model's decoder start.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlSection {
    pub start_step: Option<usize>,
    pub start_layer: Option<usize>,
    #[serde(default)]
    pub mask_enabled: bool,
    pub source_token_index: Option<usize>,
    pub target_token_index: Option<usize>,
    pub mask_threshold: Option<f64>,
    pub apply_to_unconditional: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub uncond_prob: f64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub model_seed: u64,
    /// Console progress cadence, in steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            grad_clip: 1.0,
            uncond_prob: 0.1,
            dataset_size: 1024,
            dataset_seed: 0,
            train_seed: 0,
            model_seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSection {
    pub sample: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { sample: 0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: default_model(),
            schedule: ScheduleParams::default(),
            sampling: SamplingConfig::default(),
            control: ControlSection::default(),
            train: TrainSection::default(),
            seeds: SeedSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("cannot parse config: {e}"))?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        Ok(cfg)
    }
}
