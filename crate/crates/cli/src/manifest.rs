use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Record of one run. Everything except `duration_s` is a function of the
/// command line, the config and the input bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub outputs: Vec<OutputEntry>,
    /// Frame count of the sequence the outputs describe.
    pub frames: Option<usize>,
    pub duration_s: f64,
}

/// Collects the files of one run under its output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|source| CliError::Io { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf(), entries: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        let sha256 = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        self.entries.push(OutputEntry { path: rel.to_string(), sha256, bytes: bytes.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let bytes = serde_json::to_vec(value).map_err(CliError::numeric)?;
        self.write(rel, &bytes)
    }

    /// Indented JSON, for small human-facing reports.
    pub fn write_report<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::numeric)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.outputs = self.entries;
        manifest.output_dir = self.root.display().to_string();
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(CliError::numeric)?;
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        Ok(manifest)
    }
}
