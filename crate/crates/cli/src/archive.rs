//! Versioned container for a reduced model and its build metadata.
//!
//! Layout: one header line `cardiorom-archive <version>` followed by a JSON
//! document.

use std::fs;
use std::path::Path;

use cardiorom::estimator::EstimatorState;
use cardiorom::rom::ReducedModel;
use cardiorom::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: &str = "cardiorom-archive";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomArchive {
    /// Fingerprint of the operators the model was projected from.
    pub mesh_hash: String,
    pub dt: f64,
    pub n_steps: usize,
    pub tol: f64,
    pub algorithm: String,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
    pub estimator: EstimatorState,
    pub model: ReducedModel,
}

impl RomArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Archive(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Archive("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Archive("header is not UTF-8".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::Archive(format!("not a {MAGIC} file")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Archive("unreadable format version".into()))?;
        if version != VERSION {
            return Err(Error::Archive(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        serde_json::from_slice(&bytes[split + 1..]).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the archive was built from operators with fingerprint `hash`.
    pub fn check_mesh(&self, hash: &str) -> Result<()> {
        if self.mesh_hash != hash {
            return Err(Error::Validation(format!(
                "archive was built on operators {} but the configuration yields {}",
                short(&self.mesh_hash),
                short(hash)
            )));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
