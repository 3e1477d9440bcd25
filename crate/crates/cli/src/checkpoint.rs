//! Checkpoint files: the core wire format written to disk.

use anyhow::{Context, Result};
use std::path::Path;
use tsvos_core::model::ModelState;

pub fn save_checkpoint(path: &Path, state: &ModelState, config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, state.to_bytes(config_hash))
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Returns the model and the config hash recorded at save time.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, String)> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    ModelState::from_bytes(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
