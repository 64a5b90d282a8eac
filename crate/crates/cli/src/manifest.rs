//! Run manifest: every subcommand appends one JSON line to
//! `<output_dir>/manifest.jsonl` recording what ran, with which inputs,
//! config, and seeds, and what it produced. The file is an append-only audit
//! trail — re-runs add entries rather than rewriting history.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Subcommand name, e.g. `"score"`.
    pub command: String,
    /// Full argv as invoked.
    pub argv: Vec<String>,
    /// Hex digest of the raw config file bytes.
    pub config_hash: String,
    pub seeds: ManifestSeeds,
    /// Files the stage read.
    pub inputs: Vec<String>,
    /// Files the stage wrote.
    pub outputs: Vec<String>,
    /// Backend requests actually issued (absent for offline stages).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_calls: Option<u64>,
    /// Crate version that produced the entry.
    pub version: String,
    /// Seconds since the Unix epoch at completion.
    pub unix_time: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ManifestSeeds {
    pub master: u64,
    pub split: u64,
}

/// Output summary a stage hands back for the manifest.
#[derive(Debug, Default)]
pub struct StageOutcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub backend_calls: Option<u64>,
}

impl StageOutcome {
    pub fn input(mut self, path: impl Into<PathBuf>) -> Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    pub fn calls(mut self, n: u64) -> Self {
        self.backend_calls = Some(n);
        self
    }
}

pub fn manifest_path(output_dir: &Path) -> PathBuf {
    output_dir.join("manifest.jsonl")
}

/// Appends one entry for a completed stage.
pub fn append_entry(cfg: &Config, command: &str, outcome: &StageOutcome) -> Result<()> {
    let entry = ManifestEntry {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config_hash: cfg.config_hash.clone(),
        seeds: ManifestSeeds {
            master: cfg.seeds.master,
            split: cfg.seeds.split,
        },
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        backend_calls: outcome.backend_calls,
        version: env!("CARGO_PKG_VERSION").to_string(),
        unix_time: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };

    std::fs::create_dir_all(&cfg.paths.output_dir).with_context(|| {
        format!("creating output dir {}", cfg.paths.output_dir.display())
    })?;
    let path = manifest_path(&cfg.paths.output_dir);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening manifest {}", path.display()))?;
    let line = serde_json::to_string(&entry).context("serializing manifest entry")?;
    writeln!(file, "{line}").with_context(|| format!("appending to {}", path.display()))?;
    Ok(())
}

