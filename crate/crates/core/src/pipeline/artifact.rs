//! Artifact files with `.meta.json` sidecars recording the producing stage,
//! its cumulative configuration hash and the fingerprints of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
    /// Input file name → sha256 at the time the artifact was written.
    pub upstream: BTreeMap<String, String>,
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(format!("reading {}", path.display())))
}

/// Writes through a temporary file so readers never see a partial artifact.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(Error::io(format!("renaming to {}", path.display())))
}

pub(crate) fn write_artifact(
    path: &Path,
    bytes: &[u8],
    stage: &str,
    config_hash: &str,
    upstream: BTreeMap<String, String>,
) -> Result<ArtifactMeta> {
    let meta = ArtifactMeta {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        upstream,
        sha256: sha256_hex(bytes),
    };
    write_atomic(path, bytes)?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_atomic(&meta_path(path), &json)?;
    Ok(meta)
}

pub(crate) fn read_meta(path: &Path) -> Result<Option<ArtifactMeta>> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&read_file(&mp)?)?))
}
