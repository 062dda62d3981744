//! Checkpoint file: `{"version", "config", "state"}` as JSON, replaced
//! atomically after every round.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvolutionError, RunState};
use crate::harness::runlog::write_atomic;
use crate::harness::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub state: RunState,
}

pub fn write_checkpoint(path: &Path, config: &RunConfig, state: &RunState) -> Result<(), EvolutionError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EvolutionError::Checkpoint(format!("{}: {e}", dir.display())))?;
    }
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        state: state.clone(),
    };
    let text = serde_json::to_vec(&ck).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
    write_atomic(path, &text)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, EvolutionError> {
    let text = std::fs::read(path).map_err(|e| EvolutionError::Checkpoint(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| EvolutionError::Checkpoint(format!("{}: {e}", path.display())))?;
    match v.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(EvolutionError::Checkpoint(format!("version {v} is not supported"))),
        None => return Err(EvolutionError::Checkpoint("missing version".into())),
    }
    let ck: Checkpoint = serde_json::from_value(v).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
    ck.config.check()?;
    Ok(ck)
}
