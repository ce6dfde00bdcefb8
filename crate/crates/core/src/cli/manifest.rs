use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, stored in its run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    /// "ok" or the error message.
    pub status: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 of the bytes framed like a git blob object
/// (`blob <len>\0<content>`), in hex.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256: blob_hash(&bytes),
    })
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let t = now();
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_s: t,
            finished_unix_s: t,
            status: "running".into(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.inputs.push(hash);
        Ok(())
    }

    /// Stamps the finish time and status and writes the manifest into
    /// `run_dir`, replacing any earlier one.
    pub fn finish(mut self, run_dir: &Path, status: &Result<i32>) -> Result<()> {
        self.finished_unix_s = now();
        self.status = match status {
            Ok(0) => "ok".into(),
            Ok(code) => format!("exit {code}"),
            Err(e) => format!("error: {e}"),
        };
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).map_err(|e| Error::io(&path, e))
    }
}
