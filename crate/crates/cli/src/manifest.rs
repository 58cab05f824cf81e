//! Provenance sidecar written next to every primary output. Primary
//! outputs stay byte-stable under reruns with the same seed; anything
//! time-dependent is quarantined here.

use crate::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    pub started_utc: String,
    pub finished_utc: String,
}

impl RunManifest {
    pub fn begin(command: String, config: &RunConfig) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs: Vec::new(),
            started_utc: chrono::Utc::now().to_rfc3339(),
            finished_utc: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex::encode(digest),
        });
        Ok(())
    }

    /// Writes `<primary stem>.manifest.json` beside the primary output.
    pub fn finish_beside(mut self, primary: &Path) -> std::io::Result<()> {
        self.finished_utc = chrono::Utc::now().to_rfc3339();
        let path = manifest_path(primary);
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self)?;
        writeln!(f)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let stem = primary.file_stem().unwrap_or_default().to_string_lossy();
    primary.with_file_name(format!("{stem}.manifest.json"))
}
