//! Layered run configuration: compiled defaults, then an optional TOML
//! file, then command-line flags, most specific winning.

use crate::CliError;
use mvreg_core::calib::PnpOptions;
use mvreg_core::registration::RegistrationConfig;
use mvreg_core::sweep::SweepOptions;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a run needs beyond its input files. The effective value is
/// echoed into the manifest so an experiment can be rerun from its
/// artifacts alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; individual commands mix it into their generators.
    pub seed: u64,
    /// Worker threads for parallel sections; 0 keeps the library default.
    pub jobs: usize,
    pub registration: RegistrationConfig,
    pub calibration: PnpOptions,
    pub evaluation: EvalConfig,
    pub sweep: SweepOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Silhouette sampling step used when reprojecting the fitted model.
    pub sample_spacing_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sample_spacing_mm: 1.0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            registration: RegistrationConfig::default(),
            calibration: PnpOptions::default(),
            evaluation: EvalConfig::default(),
            sweep: SweepOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}
