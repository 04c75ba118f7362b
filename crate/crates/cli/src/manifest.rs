//! Run manifest and the artifact directory it describes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Per-run engine diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub engine: String,
    pub steps: usize,
    /// Largest mass removed by clipping in one step (density engine).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_clipped_mass: Option<f64>,
    /// FPE time step over the stability limit `min(dx^2 / 2d, dx / |b|)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfl_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_drift: Option<f64>,
    /// Per-step log file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
}

/// Outcome of one configured diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub claim: String,
    /// The mathematical statement the diagnostic certifies.
    pub statement: String,
    pub pass: bool,
    pub detail: String,
    /// Fitted constant, final error or other headline number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Step count responsible for a failure, when one is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending_n: Option<usize>,
    /// Log-log slope of a convergence curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub engines: Vec<EngineSummary>,
    pub claims: Vec<Claim>,
    /// Density series used by `compare`: `(time, path)` pairs of the
    /// primary engine output.
    pub series: Vec<(f64, String)>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes artifacts under one directory, keeping their checksums.
pub struct ArtifactWriter {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String, CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.retain(|a| a.path != rel);
        self.written.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(rel.to_string())
    }

    pub fn into_artifacts(mut self) -> Vec<Artifact> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        self.written
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Reads the manifest of `dir` and checks every listed checksum.
    pub fn load_verified(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))?;
        for a in &manifest.artifacts {
            let file = dir.join(&a.path);
            let bytes = fs::read(&file).map_err(|e| CliError::Corrupt(format!("{}: {e}", file.display())))?;
            let actual = sha256_hex(&bytes);
            if actual != a.sha256 {
                return Err(CliError::Corrupt(format!(
                    "{}: checksum mismatch, manifest has sha256 {} but the file hashes to {}",
                    file.display(),
                    a.sha256,
                    actual
                )));
            }
        }
        Ok(manifest)
    }
}
