//! Run configuration: one TOML file of `key = value` pairs (with optional
//! `[synth]`, `[pretrain]`, `[model]`, `[model.encoder]` and `[baseline]`
//! tables), then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use docrec::baselines::BaselineConfig;
use docrec::ranker::ModelConfig;
use docrec::selflearn::PretrainConfig;
use docrec::synth::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub split_seed: u64,
    /// Run the dialogue-profile pretraining before ranker training when no
    /// encoder checkpoint is supplied (only `eval --seeds` and `sweep-heads`).
    pub self_learning: bool,
    pub stoplist: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            self_learning: true,
            stoplist: None,
            lexicon: None,
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(ConfigError::from)?;
        Ok(cfg)
    }

    /// One seed for everything: split, synthesis, initialization and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.synth.seed = seed;
        self.baseline.seed = seed;
        self.set_training_seed(seed);
    }

    /// Seeds that vary between repeated runs on a fixed split.
    pub fn set_training_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.model.seed = seed;
        self.model.encoder.seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.model.validate()?;
        self.model.encoder.validate().map_err(docrec::Error::from)?;
        self.baseline.validate()?;
        Ok(())
    }
}

/// Bad configuration file or conflicting options.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
        ConfigError::Invalid(msg.into()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use docrec::ranker::EncoderMode;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg = RunConfig::parse(
            "split_seed = 4\n[model]\nheads = 2\nencoder_mode = \"no_dialogue\"\n[model.encoder]\ndim = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.split_seed, 4);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.encoder_mode, EncoderMode::NoDialogue);
        assert_eq!(cfg.model.encoder.dim, 16);
        assert_eq!(cfg.model.encoder.hash_buckets, 4096);
        assert_eq!(cfg.model.lambda, 5.0);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let err = RunConfig::parse("head = 3\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        assert_eq!(
            [
                cfg.split_seed,
                cfg.synth.seed,
                cfg.pretrain.seed,
                cfg.model.seed,
                cfg.model.encoder.seed,
                cfg.baseline.seed
            ],
            [9; 6]
        );
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.model.lambda = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.encoder.dim = 1;
        assert!(cfg.validate().is_err());
    }
}
