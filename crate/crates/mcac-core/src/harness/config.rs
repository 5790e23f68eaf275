//! Run configuration: TOML file format and the resolved runtime config.
//!
//! The file has three sections, `[env]`, `[agent]`, and `[run]`; every
//! hyperparameter of the navigation profile is expressible. Unknown keys
//! anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::AgentConfig;
use crate::env::NavConfig;

use super::HarnessError;

/// Where the seeding demonstrations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DemoSource {
    Generate { n: usize, epsilon: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub total_episodes: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_rollouts")]
    pub eval_rollouts: usize,
    #[serde(default)]
    pub seed: u64,
    pub demos: DemoSource,
}

fn default_eval_every() -> usize {
    10
}

fn default_eval_rollouts() -> usize {
    10
}

/// On-disk configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub env: NavConfig,
    pub agent: AgentConfig,
    pub run: RunSection,
}

/// Fully resolved configuration for one training run. The seed determines
/// every random draw: demo generation, network init, environment dynamics,
/// exploration, minibatch sampling, and evaluation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: NavConfig,
    pub agent: AgentConfig,
    pub total_episodes: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub seed: u64,
    pub demo_source: DemoSource,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file_config(fc: FileConfig) -> Self {
        Self {
            env: fc.env,
            agent: fc.agent,
            total_episodes: fc.run.total_episodes,
            eval_every: fc.run.eval_every,
            eval_rollouts: fc.run.eval_rollouts,
            seed: fc.run.seed,
            demo_source: fc.run.demos,
            output_dir: None,
        }
    }

    pub fn parse_toml(text: &str) -> Result<Self, HarnessError> {
        let fc: FileConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Self::from_file_config(fc))
    }

    pub fn load_toml(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_toml(&text)
    }

    pub fn to_file_config(&self) -> FileConfig {
        FileConfig {
            env: self.env.clone(),
            agent: self.agent.clone(),
            run: RunSection {
                total_episodes: self.total_episodes,
                eval_every: self.eval_every,
                eval_rollouts: self.eval_rollouts,
                seed: self.seed,
                demos: self.demo_source.clone(),
            },
        }
    }

    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(&self.to_file_config()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.agent
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be positive".into()));
        }
        if self.eval_rollouts == 0 {
            return Err(HarnessError::Config("eval_rollouts must be positive".into()));
        }
        if let DemoSource::Generate { n, epsilon } = &self.demo_source {
            if *n == 0 {
                return Err(HarnessError::Config("demo count must be positive".into()));
            }
            if !(0.0..=1.0).contains(epsilon) {
                return Err(HarnessError::Config(format!(
                    "demo epsilon must lie in [0, 1], got {epsilon}"
                )));
            }
        }
        Ok(())
    }
}
