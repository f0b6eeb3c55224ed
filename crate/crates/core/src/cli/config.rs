//! Run configuration: one TOML file, strictly checked, overridable by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::rewards::{OracleRegistry, RewardConfig};
use crate::rl::PpoConfig;
use crate::schedule::ScheduleSpec;
use crate::synthworld::WorldConfig;

/// Overrides `seed` when set.
pub const SEED_ENV: &str = "POCKETPO_SEED";
/// Number of worker threads when set.
pub const WORKERS_ENV: &str = "POCKETPO_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    pub stride: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 100, stride: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub pocket_index: usize,
    /// Fine-tuning checkpoint period in iterations.
    pub checkpoint_every: usize,
    pub world: WorldConfig,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub ppo: PpoConfig,
    pub rewards: RewardConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            pocket_index: 0,
            checkpoint_every: 25,
            world: WorldConfig::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            ppo: PpoConfig::default(),
            rewards: RewardConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the seed override from the environment.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let sched = self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        if self.denoiser.layers == 0 || self.denoiser.hidden == 0 {
            return Err(Error::Config(format!("denoiser needs layers, hidden >= 1, got {:?}", self.denoiser)));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        self.pretrain.optimizer.validate()?;
        self.ppo.validate(sched.steps())?;
        self.rewards.validate(&OracleRegistry::default())?;
        if self.sample.n == 0 || self.sample.stride == 0 || self.sample.stride > sched.steps() {
            return Err(Error::Config(format!("invalid sample settings {:?}", self.sample)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Worker count from the environment, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}
