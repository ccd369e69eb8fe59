//! Run configuration: a JSON document whose sections mirror the shift spec,
//! loop, and loss-weight structures field for field. Unknown keys are a hard
//! error; `DEM_SEED` overrides both seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::LoopConfig;
use crate::losses::LossWeights;
use crate::synth::ShiftSpec;

pub const SEED_ENV_VAR: &str = "DEM_SEED";

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub shift_spec: ShiftSpec,
    pub loop_config: LoopConfig,
    pub loss_weights: LossWeights,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.shift_spec.validate()?;
        self.loop_config.validate()?;
        self.loss_weights.validate()
    }

    /// Applies the `DEM_SEED` override to the generator and loop seeds.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV_VAR) {
            let seed: u64 = raw
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV_VAR}='{raw}' is not a u64")))?;
            self.shift_spec.seed = seed;
            self.loop_config.seed = seed;
        }
        Ok(())
    }
}

/// Loads a bare shift spec document (for `gen --spec`).
pub fn load_shift_spec(path: &Path) -> Result<ShiftSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: ShiftSpec =
        serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}
