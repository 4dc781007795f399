//! Stage manifests: every stage records what configuration and inputs
//! produced its outputs, so reruns can be skipped and mixed-config output
//! directories are caught instead of silently overwritten.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Canonical hash of a JSON value. serde_json maps are sorted, so field
/// order in the source struct does not leak into the hash.
pub fn hash_value(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Hash of the config subset this stage actually consumes; differing
    /// hashes mean the artifacts cannot be reused.
    pub config_hash: String,
    /// The full resolved pipeline configuration, for provenance.
    pub config: serde_json::Value,
    /// Relative input path -> content hash. The chain of input hashes
    /// resolves every artifact back to the dataset it came from.
    pub inputs: BTreeMap<String, String>,
    /// Relative output path -> content hash.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("manifests").join(format!("{stage}.json"))
}

pub fn write_manifest(out_dir: &Path, manifest: &StageManifest) -> Result<()> {
    let path = manifest_path(out_dir, &manifest.stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(out_dir: &Path, stage: &str) -> Result<Option<StageManifest>> {
    let path = manifest_path(out_dir, stage);
    if !path.exists() {
        return Ok(None);
    }
    let content = std::fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&content)?))
}

/// Whether a stage needs to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Freshness {
    /// Manifest matches config, inputs and outputs: rerun is a no-op.
    UpToDate,
    /// No manifest, changed inputs, or missing/changed outputs: run.
    Run,
}

/// Compares the recorded manifest against the current config hash, input
/// hashes and on-disk outputs. A config mismatch is an error: the caller
/// must pick a fresh output directory rather than mix runs.
pub fn check_freshness(
    out_dir: &Path,
    stage: &'static str,
    config_hash: &str,
    inputs: &BTreeMap<String, String>,
) -> Result<Freshness> {
    let Some(manifest) = read_manifest(out_dir, stage)? else {
        return Ok(Freshness::Run);
    };
    if manifest.config_hash != config_hash {
        return Err(CliError::StaleConfig {
            stage,
            old: manifest.config_hash,
            new: config_hash.to_string(),
            manifest: manifest_path(out_dir, stage),
        });
    }
    if &manifest.inputs != inputs {
        return Ok(Freshness::Run);
    }
    for (rel, recorded) in &manifest.outputs {
        let path = out_dir.join(rel);
        if !path.exists() || hash_file(&path)? != *recorded {
            return Ok(Freshness::Run);
        }
    }
    Ok(Freshness::UpToDate)
}
