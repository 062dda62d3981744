//! Run configuration (TOML).
//!
//! Every key has a default; a file only needs the keys it changes. Unknown
//! keys are reported all at once.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcqConfig;
use crate::gp::FitOptions;
use crate::proposer::LlmConfig;
use crate::selection::{Metric, DEFAULT_DIM_THRESHOLD};

use super::objectives::Direction;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// A built-in name, or `plugin` to run `command`.
    pub name: String,
    pub dim: usize,
    /// Only read for plugins; built-ins are minimized.
    pub direction: Direction,
    pub command: Vec<String>,
    pub timeout_secs: f64,
    /// Seed for objectives that draw a random function.
    pub seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            name: "ackley".into(),
            dim: 10,
            direction: Direction::Minimize,
            command: Vec::new(),
            timeout_secs: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Evaluations after the initial design.
    pub budget: usize,
    pub initial_points: usize,
    pub population_cap: usize,
    /// Non-improving selections tolerated for initial kernels.
    pub patience: u32,
    pub metric: Metric,
    /// Above this dimension plain LOO-CRPS switches to its penalized form.
    pub dim_threshold: usize,
    pub fit_restarts: usize,
    pub fit_max_iters: usize,
    pub fit_budget_secs: f64,
    pub psd_param_samples: usize,
    pub psd_point_samples: usize,
    /// Worker threads for fitting; 0 uses all cores.
    pub workers: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            budget: 1000,
            initial_points: 20,
            population_cap: 10,
            patience: 3,
            metric: Metric::LooCrps,
            dim_threshold: DEFAULT_DIM_THRESHOLD,
            fit_restarts: 3,
            fit_max_iters: 60,
            fit_budget_secs: 60.0,
            psd_param_samples: 5,
            psd_point_samples: 5,
            workers: 0,
        }
    }
}

impl LoopConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            restarts: self.fit_restarts,
            max_iters: self.fit_max_iters,
            budget: Duration::from_secs_f64(self.fit_budget_secs.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerKind {
    Offline,
    Llm,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerConfig {
    pub kind: ProposerKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub llm: LlmConfig,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            kind: ProposerKind::Offline,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "EVOKERNEL_API_KEY".into(),
            timeout_secs: 60.0,
            llm: LlmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

impl OutputConfig {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("run.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
    pub acquisition: AcqConfig,
    pub proposer: ProposerConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            seed: 0,
            objective: ObjectiveConfig::default(),
            run: LoopConfig::default(),
            acquisition: AcqConfig::default(),
            proposer: ProposerConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn unknown_keys(given: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else { return };
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let given: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let known = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: RunConfig = given.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.schema != CONFIG_SCHEMA {
            problems.push(format!("schema {} is not supported (expected {CONFIG_SCHEMA})", self.schema));
        }
        if self.objective.dim == 0 {
            problems.push("objective.dim must be at least 1".into());
        }
        if self.run.initial_points < 2 {
            problems.push("loop.initial_points must be at least 2".into());
        }
        if self.run.population_cap == 0 {
            problems.push("loop.population_cap must be at least 1".into());
        }
        if self.objective.name == "plugin" && self.objective.command.is_empty() {
            problems.push("objective.command is required for plugins".into());
        }
        if let Err(e) = self.acquisition.check() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }

    /// Rounds after the initial design: `budget / q`.
    pub fn rounds(&self) -> usize {
        self.run.budget / self.acquisition.q.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        assert_eq!(c.rounds(), 50);
    }

    #[test]
    fn partial_file() {
        let c = RunConfig::from_toml("seed = 4\n[objective]\nname = \"levy\"\ndim = 3\n[loop]\nbudget = 40\n").unwrap();
        assert_eq!((c.seed, c.objective.dim, c.rounds()), (4, 3, 2));
        assert_eq!(c.acquisition.q, 20);
    }

    #[test]
    fn every_unknown_key_listed() {
        let err = RunConfig::from_toml("sed = 1\n[loop]\nbudgett = 3\n[nope]\nx = 1\n[proposer.llm]\ntop = 2\n").unwrap_err();
        let ConfigError::UnknownKeys(keys) = err else { panic!("{err}") };
        assert_eq!(keys.len(), 4, "{keys:?}");
        for k in ["sed", "loop.budgett", "nope", "proposer.llm.top"] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
    }

    #[test]
    fn semantic_errors() {
        assert!(RunConfig::from_toml("[acquisition]\nq = 0\n").is_err());
        assert!(RunConfig::from_toml("[objective]\nname = \"plugin\"\n").is_err());
        assert!(RunConfig::from_toml("[loop]\nmetric = \"waic\"\n").is_err());
    }
}
