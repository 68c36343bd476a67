use std::path::Path;

use anyhow::{Context, Result};
use dyngs::synth::SceneSpec;
use dyngs::trainer::{AblationGrid, TrainConfig};
use serde::Deserialize;

/// Contents of `--config`: any subset of the three tables.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub ablation: AblationGrid,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
