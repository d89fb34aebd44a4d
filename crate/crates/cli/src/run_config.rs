//! The JSON run configuration and its command-line overrides.

use std::path::Path;

use boningknife::synth::SyntheticGrammarConfig;
use boningknife::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticGrammarConfig,
    /// Train/dev/test ratios for `gen`.
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticGrammarConfig::default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl RunConfig {
    /// Defaults, or the file at `path` if given. Unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Assigns `value` to `slot` when the flag was given.
pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
