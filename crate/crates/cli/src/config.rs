//! The run configuration file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use edpq_core::envs::{BehaviorSpec, ToyChainEnv};
use edpq_core::experiments::{toy_config, AblationGrid, ReconstructConfig, TOY_EPISODES};
use edpq_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a command may read. Sections left out of the file keep their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Offline episodes generated per dataset.
    pub episodes: usize,
    /// Steps between periodic checkpoints; zero keeps only the final one.
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub env: ToyChainEnv,
    pub behavior: BehaviorSpec,
    pub reconstruct: ReconstructConfig,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episodes: TOY_EPISODES,
            checkpoint_every: 1000,
            train: toy_config(),
            env: ToyChainEnv::default(),
            behavior: BehaviorSpec::default(),
            reconstruct: ReconstructConfig::default(),
            ablation: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses `text` as overrides on top of [`RunConfig::default`], key by
    /// key, so a partial section keeps the remaining defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(Self::default())?;
        merge(&mut merged, overrides);
        Ok(toml::Value::Table(merged).try_into()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            bail!("episodes must be positive");
        }
        self.train.validate()?;
        self.env.validate()?;
        self.behavior.validate()?;
        self.ablation.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
