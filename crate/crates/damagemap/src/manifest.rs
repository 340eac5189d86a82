//! The run manifest every subcommand leaves in its output directory.
//!
//! A manifest is written (status `running`) before any work begins, then
//! finalized in place on exit with an end timestamp, the produced artifact
//! list, and the terminal status. Together with the resolved config and
//! explicit seeds it records, a finished manifest is sufficient to reproduce
//! the run: rerunning the subcommand with the same config, inputs, and seeds
//! regenerates the artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

/// File name of the manifest inside a run's output directory.
pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Terminal state of a run.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum RunStatus {
    /// Written at start; a manifest still in this state marks an interrupted
    /// run.
    Running,
    Ok,
    Error(String),
}

/// Reproducibility record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub toolkit_version: String,
    /// Resolved config with every default materialized.
    pub config: PipelineConfig,
    /// Named input paths (dataset, checkpoint, images, …).
    pub inputs: BTreeMap<String, String>,
    /// Artifacts written, relative to the output directory.
    pub artifacts: Vec<String>,
    pub seeds: Vec<u64>,
    /// RFC 3339 UTC timestamps.
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    /// Opens a manifest in the `running` state, stamped with the current
    /// time and crate version.
    pub fn begin(
        subcommand: &str,
        config: PipelineConfig,
        inputs: BTreeMap<String, String>,
        seeds: Vec<u64>,
    ) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs,
            artifacts: Vec::new(),
            seeds,
            started_at: now_rfc3339(),
            finished_at: None,
            status: RunStatus::Running,
        }
    }

    /// Records the run's end: artifact list and terminal status, with the
    /// finish timestamp.
    pub fn finalize(&mut self, artifacts: Vec<String>, status: RunStatus) {
        self.artifacts = artifacts;
        self.finished_at = Some(now_rfc3339());
        self.status = status;
    }

    /// Writes `run_manifest.json` under `dir` (pretty JSON, atomic enough
    /// for a single writer).
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
