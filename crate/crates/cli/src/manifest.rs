use std::path::{Path, PathBuf};

use ammc::util::{sha256_file, write_atomic};
use ammc::{Error, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// What a command ran on and what it wrote. Enough to rerun it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
    /// Command-specific facts, such as the stop reason or the freeze check.
    pub notes: serde_json::Map<String, serde_json::Value>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: DateTime<Utc>,
    notes: serde_json::Map<String, serde_json::Value>,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(ManifestBuilder {
            command: command.into(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Utc::now(),
            notes: Default::default(),
        })
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.notes.insert(key.into(), v);
    }

    /// Checksums every output as it now sits on disk, then writes the
    /// manifest atomically to `path`.
    pub fn finish(self, path: &Path) -> Result<RunManifest> {
        let outputs = self
            .outputs
            .into_iter()
            .map(|p| Ok(Artifact { sha256: sha256_file(&p)?, path: p }))
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            notes: self.notes,
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, json.as_bytes())?;
        Ok(m)
    }
}
