//! Run manifests: an artifact inventory with content hashes, keyed by the
//! configuration hash.
//!
//! Identity is separated from bookkeeping: `identity` hashes the tool
//! version, the verb, the configuration hash, and the ordered artifact list
//! (paths, sizes, content hashes) — but not the stage timings. Two runs of
//! the same configuration therefore produce the same identity exactly when
//! they produced the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of a parsed configuration: the SHA-256 of its canonical JSON
/// serialization. Struct field order is fixed by the schema, so the hash is
/// stable across whitespace and key-order variations of the input file.
pub fn config_hash(config: &ScenarioConfig) -> Result<String, CliError> {
    let bytes = serde_json::to_vec(config)
        .map_err(|e| CliError::Config(format!("cannot canonicalize config: {e}")))?;
    Ok(sha256_hex(&bytes))
}

/// One persisted file, relative to the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub verb: String,
    pub config_hash: String,
    pub seed: u64,
    /// Hash over (tool_version, verb, config_hash, artifacts); identical
    /// reruns agree on it regardless of wall-clock timings.
    pub identity: String,
    pub artifacts: Vec<ArtifactEntry>,
    /// Stage durations in seconds. Excluded from `identity`.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn compute_identity(
        tool_version: &str,
        verb: &str,
        config_hash: &str,
        artifacts: &[ArtifactEntry],
    ) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            tool_version: &'a str,
            verb: &'a str,
            config_hash: &'a str,
            artifacts: &'a [ArtifactEntry],
        }
        let bytes = serde_json::to_vec(&Identity {
            tool_version,
            verb,
            config_hash,
            artifacts,
        })
        .expect("identity serialization cannot fail");
        sha256_hex(&bytes)
    }

    pub fn load(path: &Path) -> Result<RunManifest, CliError> {
        let text = fs::read_to_string(path)
            .map_err(CliError::io(format!("cannot read manifest {}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))
    }
}

/// Collects the artifacts written under one run directory and assembles the
/// manifest once the run completes.
pub struct ArtifactSink {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
    timings: BTreeMap<String, f64>,
}

impl ArtifactSink {
    pub fn new(dir: &Path) -> Result<ArtifactSink, CliError> {
        fs::create_dir_all(dir)
            .map_err(CliError::io(format!("cannot create {}", dir.display())))?;
        Ok(ArtifactSink {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Absolute path for a relative artifact name, with parents created.
    pub fn path_for(&self, rel: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(CliError::io(format!("cannot create {}", parent.display())))?;
        }
        Ok(path)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path_for(rel)?;
        fs::write(&path, bytes)
            .map_err(CliError::io(format!("cannot write {}", path.display())))?;
        self.entries.push(ArtifactEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_string(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        self.write_bytes(rel, text.as_bytes())
    }

    /// Record a file some other writer already placed at `rel`.
    pub fn record_external(&mut self, rel: &str) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        let bytes = fs::read(&path)
            .map_err(CliError::io(format!("cannot read back {}", path.display())))?;
        self.entries.push(ArtifactEntry {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn add_timing(&mut self, stage: &str, since: Instant) {
        self.timings
            .insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    /// Write `manifest.json` and return the manifest with its path.
    pub fn finish(
        self,
        verb: &str,
        config_hash: &str,
        seed: u64,
    ) -> Result<(RunManifest, PathBuf), CliError> {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let identity =
            RunManifest::compute_identity(&tool_version, verb, config_hash, &self.entries);
        let manifest = RunManifest {
            tool_version,
            verb: verb.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            identity,
            artifacts: self.entries,
            timings: self.timings,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Config(format!("cannot serialize manifest: {e}")))?;
        fs::write(&path, text)
            .map_err(CliError::io(format!("cannot write {}", path.display())))?;
        Ok((manifest, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ignores_timings_but_sees_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let run = |content: &str, secs: f64| {
            let mut sink = ArtifactSink::new(dir.path()).unwrap();
            sink.write_string("tables/a.csv", content).unwrap();
            sink.add_timing("stage", Instant::now());
            sink.timings.insert("stage".into(), secs);
            let (manifest, _) = sink.finish("simulate", "cafe", 0).unwrap();
            manifest
        };
        let a = run("x,y\n", 1.0);
        let b = run("x,y\n", 250.0);
        let c = run("x,y\n1,2\n", 1.0);
        assert_eq!(a.identity, b.identity);
        assert_ne!(a.identity, c.identity);
    }

    #[test]
    fn config_hash_is_stable_across_formatting() {
        let text = r#"{
            "version": 1,
            "grid": { "dims": [16, 16] },
            "model": { "dynamics": "heat", "diffusion": [0.05] }
        }"#;
        let compact = r#"{"version":1,"model":{"diffusion":[0.05],"dynamics":"heat"},"grid":{"dims":[16,16]}}"#;
        let a = config_hash(&ScenarioConfig::parse(text).unwrap()).unwrap();
        let b = config_hash(&ScenarioConfig::parse(compact).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }
}
