//! Per-run record written next to every artifact directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, LabResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full argument vector, program name excluded.
    pub argv: Vec<String>,
    /// Resolved config, enough to rerun the command.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub git: String,
    pub version: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub wall_time_seconds: f64,
}

/// Collects a manifest while a command runs; `finish` stamps the wall time.
pub struct RunRecorder {
    started: Instant,
    pub manifest: RunManifest,
}

impl RunRecorder {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                argv,
                config: Value::Null,
                seeds: BTreeMap::new(),
                git: git_describe(),
                version: env!("CARGO_PKG_VERSION").into(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_seconds: 0.0,
            },
        }
    }

    pub fn config(&mut self, config: Value) -> &mut Self {
        self.manifest.config = config;
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.into(), seed);
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.outputs.insert(name.into(), path.to_path_buf());
        self
    }

    /// Writes `run_manifest.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> LabResult<RunManifest> {
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        write_atomic_json(&dir.join(RUN_MANIFEST), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn write_atomic_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::json(path, e))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| LabError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn read_run_manifest(dir: &Path) -> LabResult<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    if !path.is_file() {
        return Err(LabError::dependency("run manifest", &path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(&path, e))
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
