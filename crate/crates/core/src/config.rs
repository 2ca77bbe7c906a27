//! Run configuration: a flat key-value text file, an environment seed
//! override, and a content hash that stamps every artifact for provenance.

use crate::embedding::TrainConfig;
use crate::error::{Error, Result};
use crate::inference::ScoringMode;
use crate::preprocess::forest::ForestConfig;
use crate::schema::FeatureSet;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SEED_ENV_VAR: &str = "SENTINEL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub feature_set: FeatureSet,
    pub importance_threshold: Option<f64>,
    /// Maximum input token length for external transformer backends; the
    /// reference encoder has no token concept.
    pub token_length: u32,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub triplets_per_epoch: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub support_k: usize,
    pub grid_start: f64,
    pub grid_end: f64,
    pub grid_step: f64,
    pub seed: u64,
    pub benign_label: String,
    pub scoring: ScoringMode,
    pub forest_trees: usize,
    pub forest_depth: usize,
    pub tcp_idle_timeout: f64,
    pub udp_idle_timeout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feature_set: FeatureSet::FlowPacketDerived,
            importance_threshold: Some(0.01),
            token_length: 512,
            margin: 0.3,
            epochs: 30,
            batch_size: 32,
            step_size: 0.01,
            triplets_per_epoch: 256,
            embedding_dim: 64,
            hidden_dim: 64,
            support_k: 10,
            grid_start: 0.1,
            grid_end: 0.8,
            grid_step: 0.05,
            seed: 42,
            benign_label: "Benign".to_string(),
            scoring: ScoringMode::NearestNeighbor,
            forest_trees: 50,
            forest_depth: 12,
            tcp_idle_timeout: 300.0,
            udp_idle_timeout: 60.0,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected so typos fail loudly.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidSpec(format!("config line {}: expected key = value", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("config key {key}: bad value {value:?}")))
        }
        match key {
            "feature_set" => self.feature_set = FeatureSet::parse(value)?,
            "importance_threshold" => {
                self.importance_threshold = match value {
                    "none" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "token_length" => self.token_length = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "step_size" => self.step_size = parse(key, value)?,
            "triplets_per_epoch" => self.triplets_per_epoch = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "support_k" => self.support_k = parse(key, value)?,
            "grid_start" => self.grid_start = parse(key, value)?,
            "grid_end" => self.grid_end = parse(key, value)?,
            "grid_step" => self.grid_step = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "benign_label" => self.benign_label = value.to_string(),
            "scoring" => self.scoring = ScoringMode::parse(value)?,
            "forest_trees" => self.forest_trees = parse(key, value)?,
            "forest_depth" => self.forest_depth = parse(key, value)?,
            "tcp_idle_timeout" => self.tcp_idle_timeout = parse(key, value)?,
            "udp_idle_timeout" => self.udp_idle_timeout = parse(key, value)?,
            other => {
                return Err(Error::InvalidSpec(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.token_length, 256 | 512) {
            return Err(Error::InvalidSpec(format!(
                "token_length must be 256 or 512, got {}",
                self.token_length
            )));
        }
        if let Some(t) = self.importance_threshold {
            if t != 0.01 && t != 0.02 {
                return Err(Error::InvalidSpec(format!(
                    "importance_threshold must be none, 0.01 or 0.02, got {t}"
                )));
            }
        }
        if self.margin <= 0.0 {
            return Err(Error::InvalidSpec("margin must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.triplets_per_epoch == 0 {
            return Err(Error::InvalidSpec("training sizes must be positive".into()));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.support_k == 0 {
            return Err(Error::InvalidSpec("dimensions must be positive".into()));
        }
        if self.benign_label == crate::inference::UNKNOWN_LABEL {
            return Err(Error::InvalidSpec(
                "benign_label cannot be the reserved unknown label".into(),
            ));
        }
        crate::calibration::ThresholdGrid::new(self.grid_start, self.grid_end, self.grid_step)?;
        Ok(())
    }

    /// Load from an optional file, then apply the `SENTINEL_SEED` override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_text(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            config.seed = seed.parse().map_err(|_| {
                Error::InvalidSpec(format!("{SEED_ENV_VAR} must be an integer, got {seed:?}"))
            })?;
        }
        Ok(config)
    }

    /// Canonical sorted `key=value` listing; the hash input.
    pub fn canonical_text(&self) -> String {
        let threshold = match self.importance_threshold {
            None => "none".to_string(),
            Some(t) => format!("{t}"),
        };
        let mut pairs = vec![
            format!("batch_size={}", self.batch_size),
            format!("benign_label={}", self.benign_label),
            format!("embedding_dim={}", self.embedding_dim),
            format!("epochs={}", self.epochs),
            format!("feature_set={}", self.feature_set.as_str()),
            format!("forest_depth={}", self.forest_depth),
            format!("forest_trees={}", self.forest_trees),
            format!("grid_end={}", self.grid_end),
            format!("grid_start={}", self.grid_start),
            format!("grid_step={}", self.grid_step),
            format!("hidden_dim={}", self.hidden_dim),
            format!("importance_threshold={threshold}"),
            format!("margin={}", self.margin),
            format!("scoring={}", self.scoring.as_str()),
            format!("seed={}", self.seed),
            format!("step_size={}", self.step_size),
            format!("support_k={}", self.support_k),
            format!("tcp_idle_timeout={}", self.tcp_idle_timeout),
            format!("token_length={}", self.token_length),
            format!("triplets_per_epoch={}", self.triplets_per_epoch),
            format!("udp_idle_timeout={}", self.udp_idle_timeout),
        ];
        pairs.sort();
        pairs.join("\n")
    }

    /// Short content hash naming the producing configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            triplets_per_epoch: self.triplets_per_epoch,
            batch_size: self.batch_size,
            learning_rate: self.step_size,
            margin: self.margin,
            dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
        }
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.forest_trees,
            max_depth: self.forest_depth,
            min_samples_split: 2,
            seed: self.seed,
        }
    }

    pub fn grid(&self) -> Result<crate::calibration::ThresholdGrid> {
        crate::calibration::ThresholdGrid::new(self.grid_start, self.grid_end, self.grid_step)
    }
}
