//! Run manifests: what went in, what came out, and digests of both.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use lwa_core::config::LossWeights;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of the resolved config JSON.
    pub config_sha256: Option<String>,
    pub loss_weights: Option<LossWeights>,
    /// Value of `LWA_DETERMINISTIC` (`"1"` when unset).
    pub deterministic: String,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn now_rfc3339() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_else(|_| "unknown".into())
}

pub fn deterministic_flag() -> String {
    std::env::var("LWA_DETERMINISTIC").unwrap_or_else(|_| "1".into())
}

/// Collects inputs and outputs while a command runs.
#[derive(Debug, Clone)]
pub struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    seed: Option<u64>,
    config_sha256: Option<String>,
    loss_weights: Option<LossWeights>,
    started_at: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            seed: None,
            config_sha256: None,
            loss_weights: None,
            started_at: now_rfc3339(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config_json(&mut self, resolved: &str) {
        self.config_sha256 = Some(sha256_hex(resolved.as_bytes()));
    }

    pub fn loss_weights(&mut self, w: LossWeights) {
        self.loss_weights = Some(w);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Digests every recorded file and writes `manifest.json` into `dir`.
    pub fn write(self, dir: &Path) -> Result<RunManifest, CliError> {
        let digest = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>, _>>();
        let manifest = RunManifest {
            format_version: 1,
            tool: "lwa",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: self.args,
            seed: self.seed,
            config_sha256: self.config_sha256,
            loss_weights: self.loss_weights,
            deterministic: deterministic_flag(),
            started_at: self.started_at,
            finished_at: now_rfc3339(),
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}
