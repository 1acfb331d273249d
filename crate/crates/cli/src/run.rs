//! Run directories and their manifest.
//!
//! Every training command writes into a fresh directory containing exactly
//! one `run_manifest.json` recording what ran: the command line, the fully
//! resolved configuration, its hash, the code version, and the produced
//! files. Existing run directories are never overwritten.

use chrono::{SecondsFormat, Utc};
use rubikssl_core::model::TransferReport;
use rubikssl_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration in the config-file grammar.
    pub config: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub started_utc: String,
    pub finished_utc: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferReport>,
}

/// RFC 3339 timestamp; pinned to the epoch in deterministic runs so repeated
/// runs produce byte-identical directories.
pub fn timestamp(deterministic: bool) -> String {
    if deterministic {
        "1970-01-01T00:00:00Z".to_string()
    } else {
        Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

/// Creates the run directory. A directory that already holds a run manifest
/// is refused rather than appended to.
pub fn prepare_run_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join(RUN_MANIFEST);
    if manifest.exists() {
        return Err(Error::Config(format!(
            "{} already contains a run; pick a fresh output directory",
            out.display()
        )));
    }
    Ok(())
}

pub fn write_run_manifest(out: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = out.join(RUN_MANIFEST);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(&path, format!("serialize run manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
