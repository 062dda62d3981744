//! Objectives, diagnostics, configuration, and run records.

pub mod baseline;
pub mod config;
pub mod diagnostics;
pub mod objectives;
pub mod plugin;
pub mod report;
pub mod runlog;

pub use baseline::random_search;
pub use config::{ConfigError, LoopConfig, ObjectiveConfig, OutputConfig, ProposerConfig, ProposerKind, RunConfig, CONFIG_SCHEMA};
pub use diagnostics::{boundary_hit_ratio, otsd, DEFAULT_BOUNDARY_TOL};
pub use objectives::{builtin_objective, Builtin, Direction, Objective, ObjectiveError};
pub use plugin::{PluginError, PluginObjective};
