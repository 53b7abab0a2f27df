//! Run manifests: everything needed to reproduce a run byte for byte.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ebcharge_core::config::Config;
use ebcharge_core::{Error, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
    pub episodes_override: Option<usize>,
    pub config_path: Option<PathBuf>,
    pub config: Option<Config>,
    pub data_digests: Vec<FileDigest>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: format!("{:x}", hasher.finalize()),
    })
}

impl RunManifest {
    /// Serializes and writes the manifest into the run directory. Called
    /// before any training step.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Contract(format!("manifest serialization failed: {e}")))?;
        std::fs::write(out_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

pub fn version_string() -> String {
    format!("ebcharge {}", env!("CARGO_PKG_VERSION"))
}
