//! Run manifests: what a command was asked to do and checksums of what it
//! wrote.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<Artifact>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, started_unix: f64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            started_unix,
            finished_unix: started_unix,
            outputs: Vec::new(),
        }
    }

    /// Records checksums of `files`, naming each relative to `root` when
    /// possible.
    pub fn add_outputs<P: AsRef<Path>>(&mut self, root: &Path, files: &[P]) -> Result<()> {
        for f in files {
            let f = f.as_ref();
            let (sha256, bytes) = sha256_file(f)?;
            let path = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            self.outputs.push(Artifact { path, sha256, bytes });
        }
        Ok(())
    }

    /// Stamps the finish time and writes the manifest atomically.
    pub fn finish(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_atomic(path, json.as_bytes())?;
        Ok(path.to_path_buf())
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
