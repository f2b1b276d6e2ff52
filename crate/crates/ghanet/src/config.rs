//! The JSON run configuration. Every section and key is optional; unknown
//! keys are rejected by name.

use std::path::Path;

use ghanet_core::synth::SynthConfig;
use ghanet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k_percent: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_percent: vec![10.0, 15.0, 20.0, 25.0, 30.0, 35.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Cohort generated when a command is given no manifest.
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`); `seed` replaces `train.seed`,
    /// which also seeds synthetic cohorts.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.train.seed = s;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.sweep.k_percent.is_empty() {
            return Err(Error::Invalid("sweep.k_percent is empty".into()));
        }
        if let Some(k) = self.sweep.k_percent.iter().find(|&&k| !(k > 0.0 && k <= 100.0)) {
            return Err(Error::Invalid(format!("sweep.k_percent value {k} is outside (0, 100]")));
        }
        Ok(())
    }
}
