//! Run configuration, loaded from a single JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::WorldSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub generator: Option<String>,
    pub editor: Option<String>,
    pub agent: Option<String>,
    pub scorer: Option<String>,
    pub grounding: Option<String>,
}

impl Endpoints {
    pub const ENV_GENERATOR: &'static str = "RAISE_GENERATOR_URL";
    pub const ENV_EDITOR: &'static str = "RAISE_EDITOR_URL";
    pub const ENV_AGENT: &'static str = "RAISE_AGENT_URL";
    pub const ENV_SCORER: &'static str = "RAISE_SCORER_URL";
    pub const ENV_GROUNDING: &'static str = "RAISE_GROUNDING_URL";

    /// Overrides endpoints from `RAISE_*_URL` variables.
    pub fn apply_env(&mut self) {
        self.apply_vars(|k| std::env::var(k).ok());
    }

    pub fn apply_vars(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let slots = [
            (Self::ENV_GENERATOR, &mut self.generator),
            (Self::ENV_EDITOR, &mut self.editor),
            (Self::ENV_AGENT, &mut self.agent),
            (Self::ENV_SCORER, &mut self.scorer),
            (Self::ENV_GROUNDING, &mut self.grounding),
        ];
        for (var, slot) in slots {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                *slot = Some(v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k_min: u32,
    pub k_max: u32,
    pub early_resample: u32,
    pub early_rewrite: u32,
    pub late_rewrite: u32,
    pub run_seed: u64,
    pub parallelism: usize,
    pub endpoints: Endpoints,
    /// Model name sent on chat requests.
    pub agent_model: String,
    pub timeout_secs: u64,
    /// Re-asks allowed after a schema violation.
    pub agent_retries: u32,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub enable_editing: bool,
    pub enable_grounding_tools: bool,
    /// Testing hook: ignore adaptive stopping and run exactly this many rounds.
    pub force_rounds: Option<u32>,
    /// World for the simulated backends; defaults apply when absent.
    pub sim_world: Option<WorldSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 4,
            early_resample: 4,
            early_rewrite: 4,
            late_rewrite: 5,
            run_seed: 0,
            parallelism: 4,
            endpoints: Endpoints::default(),
            agent_model: "default".to_string(),
            timeout_secs: 300,
            agent_retries: 2,
            width: 1024,
            height: 1024,
            steps: 28,
            enable_editing: true,
            enable_grounding_tools: true,
            force_rounds: None,
            sim_world: None,
        }
    }
}

/// Number of edit candidates in a late round (top, random, comp).
pub const LATE_EDIT_COUNT: u32 = 3;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k_min < 1 {
            return Err(invalid("k_min", "must be at least 1"));
        }
        if self.k_min > self.k_max {
            return Err(invalid(
                "k_min",
                format!("k_min ({}) exceeds k_max ({})", self.k_min, self.k_max),
            ));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        if self.early_resample + self.early_rewrite == 0 {
            return Err(invalid("early_rewrite", "early rounds would produce no candidates"));
        }
        if self.late_rewrite + LATE_EDIT_COUNT == 0 {
            return Err(invalid("late_rewrite", "late rounds would produce no candidates"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width", "image dimensions must be positive"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if self.timeout_secs == 0 {
            return Err(invalid("timeout_secs", "must be at least 1"));
        }
        if let Some(n) = self.force_rounds {
            if n == 0 || n > self.k_max {
                return Err(invalid(
                    "force_rounds",
                    format!("must lie in 1..={} (k_max)", self.k_max),
                ));
            }
        }
        if let Some(world) = &self.sim_world {
            world.validate().map_err(|reason| invalid("sim_world", reason))?;
        }
        Ok(())
    }

    /// Candidates per round for the early phase and the late phase.
    pub fn early_population(&self) -> u32 {
        self.early_resample + self.early_rewrite
    }

    pub fn late_population(&self) -> u32 {
        self.late_rewrite + LATE_EDIT_COUNT
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs(self.timeout_secs)
    }

    pub fn world(&self) -> WorldSpec {
        self.sim_world.clone().unwrap_or_default()
    }
}
