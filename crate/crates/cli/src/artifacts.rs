//! Output artifact envelope: every JSON payload carries the config hash and
//! master seed. The creation timestamp is informational only and excluded
//! from any determinism comparison or hash.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use smoothinv::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub seed: u64,
    /// Unix seconds at write time; excluded from hashes and comparisons.
    pub created_unix: u64,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    pub fn new(config_hash: String, seed: u64, payload: T) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Artifact {
            config_hash,
            seed,
            created_unix,
            payload,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The payload serialized alone — the byte-identical part of the
    /// artifact under the determinism contract.
    pub fn payload_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.payload)?)
    }
}
