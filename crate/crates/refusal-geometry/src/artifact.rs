//! Manifest-based provenance for experiment artifacts.
//!
//! Every pipeline command writes a manifest next to its outputs recording
//! the command, seed, config echo, and the SHA-256 of every input and
//! output file. Manifests carry no timestamps, so identical runs produce
//! identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::Error;

/// SHA-256 of a file's bytes, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub crate_version: String,
    pub inputs: Vec<ManifestEntry>,
    pub outputs: Vec<ManifestEntry>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            schema_version: 1,
            command: command.to_string(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
        }
    }

    /// Records an input file and its current checksum.
    pub fn add_input(&mut self, path: &Path) -> Result<(), Error> {
        self.inputs.push(ManifestEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Records an output file and its current checksum.
    pub fn add_output(&mut self, path: &Path) -> Result<(), Error> {
        self.outputs.push(ManifestEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip_and_checksums() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in.txt");
        std::fs::write(&input, b"hello").unwrap();
        let mut m = Manifest::new("test-cmd", 42, serde_json::json!({"k": 1}));
        m.add_input(&input).unwrap();
        let mpath = tmp.path().join("manifest.json");
        m.save(&mpath).unwrap();
        let back = Manifest::load(&mpath).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.inputs[0].sha256, sha256_file(&input).unwrap());
    }
}
