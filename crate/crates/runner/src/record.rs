//! Run provenance: the output bundle of an experiment and its on-disk record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{RunError, RunResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Deterministic metrics table.
    Metrics,
    /// Chart specification.
    Plot,
    Data,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub kind: ArtifactKind,
    pub contents: String,
}

impl Artifact {
    pub fn metrics(path: impl Into<String>, contents: String) -> Self {
        Self {
            path: path.into(),
            kind: ArtifactKind::Metrics,
            contents,
        }
    }

    pub fn plot(path: impl Into<String>, contents: String) -> Self {
        Self {
            path: path.into(),
            kind: ArtifactKind::Plot,
            contents,
        }
    }
}

/// Everything an experiment produces before it touches the filesystem.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub artifacts: Vec<Artifact>,
    /// Files already written into the run directory (datasets, checkpoints).
    pub files: Vec<String>,
    /// Headline numbers; non-finite values mark quantities that were never
    /// reached (serialized as `null`).
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentOutput {
    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub kind: ArtifactKind,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub tool_version: String,
    pub config: Value,
    /// Hash of the canonical config JSON, framed like a git blob.
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub summary: BTreeMap<String, Option<f64>>,
}

pub const RECORD_FILE: &str = "run_record.json";

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    blob_hash(canonical.as_bytes())
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_file(path: &Path, contents: &[u8]) -> RunResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| RunError::io(path, e))
}

/// Writes every artifact under `dir` and then the run record.
pub fn persist(
    dir: &Path,
    experiment: &str,
    config: &ExperimentConfig,
    output: &ExperimentOutput,
    started: DateTime<Utc>,
) -> RunResult<(PathBuf, RunRecord)> {
    let mut entries = Vec::with_capacity(output.artifacts.len());
    for a in &output.artifacts {
        write_file(&dir.join(&a.path), a.contents.as_bytes())?;
        entries.push(ArtifactEntry {
            path: a.path.clone(),
            kind: a.kind,
            sha256: blob_hash(a.contents.as_bytes()),
        });
    }
    for f in &output.files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| RunError::io(&path, e))?;
        entries.push(ArtifactEntry {
            path: f.clone(),
            kind: ArtifactKind::Data,
            sha256: blob_hash(&bytes),
        });
    }
    let record = RunRecord {
        experiment: experiment.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
        config_hash: config_hash(config),
        started_at: timestamp(started),
        finished_at: timestamp(Utc::now()),
        artifacts: entries,
        summary: output
            .summary
            .iter()
            .map(|(k, v)| (k.clone(), v.is_finite().then_some(*v)))
            .collect(),
    };
    let path = dir.join(RECORD_FILE);
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok((path, record))
}
