//! Provenance record written next to every command's outputs.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use subdepth_core::synth::RUN_MANIFEST_NAME;

use crate::config::RunConfig;

pub const VERSION_TAG: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    /// Which training run inside the command, e.g. `teacher` or `subdepth/seed1`.
    pub run: String,
    pub epoch: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_hash: Option<String>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub epoch_timings: Vec<EpochTiming>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String], config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            version: VERSION_TAG.to_string(),
            seed: config.seed,
            config: config.clone(),
            dataset_hash: None,
            started_at: unix_now(),
            finished_at: 0.0,
            epoch_timings: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at = unix_now();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
