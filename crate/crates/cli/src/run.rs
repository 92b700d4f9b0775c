//! Run directories: content-addressed output locations, a per-directory lock
//! and the run manifest.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use charlab::corpus::sha256_hex;
use charlab::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_NAME: &str = "run.json";
const LOCK_NAME: &str = ".lock";

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Hashes every file under `path` (recursively for directories, in sorted
/// order), skipping run manifests and locks.
pub fn hash_input(path: &Path) -> Result<Vec<InputHash>> {
    let mut out = Vec::new();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == MANIFEST_NAME || name == LOCK_NAME {
                continue;
            }
            out.extend(hash_input(&p)?);
        }
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        out.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(out)
}

/// An output directory held for the lifetime of the value.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config: Value,
    inputs: Vec<InputHash>,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunDir {
    /// Creates (or reuses) `<root>/<command>-<hash>` where the hash covers the
    /// command, its configuration and the contents of its inputs.
    pub fn create(root: &Path, command: &str, config: Value, inputs: &[&Path], seeds: Vec<u64>) -> Result<Self> {
        let mut hashes = Vec::new();
        for p in inputs {
            hashes.extend(hash_input(p)?);
        }
        let key = serde_json::json!({
            "command": command,
            "config": config,
            "inputs": hashes.iter().map(|h| &h.sha256).collect::<Vec<_>>(),
        });
        let digest = sha256_hex(serde_json::to_string(&key)?.as_bytes());
        let path = root.join(format!("{command}-{}", &digest[..12]));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let lock = path.join(LOCK_NAME);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::InvalidArgument(format!(
                        "{} is locked by another run (remove {} if stale)",
                        path.display(),
                        lock.display()
                    ))
                } else {
                    Error::io(&lock, e)
                }
            })?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            config,
            inputs: hashes,
            seeds,
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Path of an output file, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.path.join(name)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            inputs: std::mem::take(&mut self.inputs),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: self.seeds.clone(),
            outputs: std::mem::take(&mut self.outputs),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let p = self.path.join(MANIFEST_NAME);
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(self.path.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_NAME));
    }
}
