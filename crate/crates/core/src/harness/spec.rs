use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::StrategyConfig;
use crate::error::{Error, Result};
use crate::simworld::{EnvConfig, ExpertConfig};

/// Environment variable that overrides an experiment's master seed.
pub const SEED_ENV: &str = "SCALE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStrategy {
    pub name: String,
    #[serde(flatten)]
    pub config: StrategyConfig,
}

/// A strategy x seed x episode experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub expert: ExpertConfig,
    pub strategies: Vec<NamedStrategy>,
    /// Episodes per strategy and seed.
    pub n_episodes: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Keep per-step telemetry in the raw output.
    #[serde(default = "default_true")]
    pub record_trace: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn new(env: EnvConfig, strategies: Vec<NamedStrategy>, n_episodes: usize, n_seeds: usize) -> Self {
        Self {
            env,
            expert: ExpertConfig::default(),
            strategies,
            n_episodes,
            n_seeds,
            master_seed: 0,
            record_trace: true,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("spec lists no strategies"));
        }
        if self.n_episodes == 0 {
            return Err(Error::config("n_episodes must be at least 1"));
        }
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be at least 1"));
        }
        let mut seen = HashSet::new();
        for s in &self.strategies {
            if s.name.is_empty() {
                return Err(Error::config("strategy names must be non-empty"));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::config(format!("duplicate strategy name '{}'", s.name)));
            }
            s.config
                .validate()
                .map_err(|e| Error::config(format!("strategy '{}': {e}", s.name)))?;
        }
        self.env.validate()?;
        if !(self.expert.beta > 0.0 && self.expert.beta.is_finite()) {
            return Err(Error::config("expert.beta must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// `flag`, then `SCALE_SEED`, then the file's own value.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(s) = flag {
            self.master_seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.master_seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
        Ok(())
    }
}
