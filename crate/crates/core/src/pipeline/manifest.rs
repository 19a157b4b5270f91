use super::{io_err, PipelineError};
use crate::hashing::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one stage's outputs. Inputs are keyed by their path
/// relative to the working directory, or `external:<name>` for corpus files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Self>, PipelineError> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::Parse {
            path: p.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let p = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(io_err(&p))
    }
}
