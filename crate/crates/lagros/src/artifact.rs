//! Artifact provenance: every pipeline output carries the configuration
//! hash, and each command writes a manifest listing its inputs and outputs
//! with content hashes. Wall-clock measurements live in files marked
//! non-deterministic; everything else is byte-reproducible under a fixed
//! seed.

use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Prepends the provenance header shared by all artifact files.
pub fn with_provenance(content: &str, config_hash: &str, seed: u64) -> String {
    format!(
        "# config_hash = {config_hash}\n# seed = {seed}\n# tool_version = {TOOL_VERSION}\n{content}"
    )
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub deterministic: bool,
}

/// Per-command record of inputs and outputs.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ManifestEntry>,
    pub outputs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, name: &str, content: &[u8]) {
        self.inputs.push(ManifestEntry {
            name: name.to_string(),
            sha256: sha256_hex(content),
            deterministic: true,
        });
    }

    pub fn record_output(&mut self, name: &str, content: &[u8], deterministic: bool) {
        self.outputs.push(ManifestEntry {
            name: name.to_string(),
            sha256: sha256_hex(content),
            deterministic,
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# lagros-manifest v1\n");
        out.push_str(&format!("command = {}\n", self.command));
        out.push_str(&format!("tool_version = {TOOL_VERSION}\n"));
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        out.push_str(&format!("seed = {}\n", self.seed));
        for e in &self.inputs {
            out.push_str(&format!("input {} = {}\n", e.name, e.sha256));
        }
        for e in &self.outputs {
            out.push_str(&format!(
                "output {} = {} deterministic={}\n",
                e.name, e.sha256, e.deterministic
            ));
        }
        out
    }
}

/// Writes an artifact with its provenance header and records it in the
/// manifest. Returns the full path.
pub fn write_artifact(
    dir: &Path,
    name: &str,
    content: &str,
    config_hash: &str,
    seed: u64,
    deterministic: bool,
    manifest: &mut Manifest,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stamped = with_provenance(content, config_hash, seed);
    let path = dir.join(name);
    std::fs::write(&path, &stamped)?;
    manifest.record_output(name, stamped.as_bytes(), deterministic);
    Ok(path)
}

/// Reads a required artifact, mapping a missing file to an error naming the
/// command that produces it.
pub fn read_artifact(path: &Path, producer: &str) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        }),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn provenance_header_prepends_cleanly() {
        let s = with_provenance("x = 1\n", "deadbeef", 7);
        assert!(s.starts_with("# config_hash = deadbeef\n# seed = 7\n"));
        assert!(s.ends_with("x = 1\n"));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let err = read_artifact(Path::new("/nonexistent/metric.csv"), "synthesize-metric")
            .unwrap_err();
        match err {
            Error::MissingArtifact { producer, .. } => {
                assert_eq!(producer, "synthesize-metric")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_lists_inputs_and_outputs() {
        let mut m = Manifest::new("train", "cafe", 3);
        m.record_input("dataset.csv", b"data");
        m.record_output("policy.txt", b"weights", true);
        m.record_output("timing.csv", b"1.0", false);
        let text = m.to_text();
        assert!(text.contains("command = train"));
        assert!(text.contains("input dataset.csv = "));
        assert!(text.contains("deterministic=false"));
    }
}
