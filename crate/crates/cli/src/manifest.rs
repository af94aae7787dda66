//! Run manifests: what was run, with which inputs, and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input, CliError};
use crate::{Command, Format};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub format: Format,
    /// `--seed` as given on the command line.
    pub seed_override: Option<u64>,
    /// Seeds actually used.
    pub seeds: Vec<u64>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
}

/// An input file, embedded so that the run can be replayed elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a UTF-8 input file and records it for the manifest.
pub fn read_input(role: &str, path: &Path) -> Result<(String, InputFile), CliError> {
    let content = fs::read_to_string(path)
        .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let record = InputFile {
        role: role.to_string(),
        path: path.to_path_buf(),
        sha256: sha256_hex(content.as_bytes()),
        content: content.clone(),
    };
    Ok((content, record))
}

pub fn load(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| input(format!("{} is not a run manifest: {e}", path.display())))
}
