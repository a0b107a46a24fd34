//! Run manifests: resolved config, seed and SHA-256 digests of every input
//! and output, written beside the outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Path and digest of one artifact. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Fully resolved config in `key=value` form.
    pub config: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Manifest path for a single-file output.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| {
        std::env::current_dir()
            .map(|d| d.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    })
}

fn dir_of(manifest: &Path) -> PathBuf {
    absolute(
        manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new(".")),
    )
}

fn relative_to(path: &Path, base: &Path) -> String {
    let abs = absolute(path);
    pathdiff::diff_paths(&abs, base)
        .unwrap_or(abs)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Collects the artifacts of one command and writes its manifest.
pub struct Recorder {
    path: PathBuf,
    force: bool,
    previous: Option<Manifest>,
    inputs: Vec<(String, PathBuf, String)>,
    outputs: Vec<(String, PathBuf)>,
}

impl Recorder {
    pub fn new(path: PathBuf, force: bool) -> Result<Self, CliError> {
        let previous = if path.exists() {
            Some(Manifest::load(&path)?)
        } else {
            None
        };
        Ok(Self {
            path,
            force,
            previous,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn mismatch(
        &self,
        file: &Path,
        recorded: &str,
        actual: &str,
        by: &Path,
    ) -> Result<(), CliError> {
        let err = CliError::Digest {
            path: file.display().to_string(),
            manifest: by.display().to_string(),
            expected: recorded.to_string(),
            actual: actual.to_string(),
        };
        if self.force {
            log::warn!("{err} (continuing because of --force)");
            Ok(())
        } else {
            Err(err)
        }
    }

    /// Registers an input, checking its digest against this command's
    /// previous manifest and against the manifest that produced it.
    pub fn input(&mut self, role: &str, file: &Path) -> Result<(), CliError> {
        if !file.is_file() {
            return Err(CliError::MissingArtifact(format!(
                "{role} file {}",
                file.display()
            )));
        }
        let actual = file_sha256(file)?;
        let target = absolute(file);
        if let Some(prev) = &self.previous {
            let base = dir_of(&self.path);
            if let Some(d) = prev.inputs.get(role) {
                if absolute(&base.join(&d.path)) == target && d.sha256 != actual {
                    self.mismatch(file, &d.sha256, &actual, &self.path)?;
                }
            }
        }
        let upstream = manifest_for_file(file);
        if upstream.is_file() && upstream != self.path {
            let m = Manifest::load(&upstream)?;
            let base = dir_of(&upstream);
            for d in m.outputs.values() {
                if absolute(&base.join(&d.path)) == target && d.sha256 != actual {
                    self.mismatch(file, &d.sha256, &actual, &upstream)?;
                }
            }
        }
        self.inputs
            .push((role.to_string(), file.to_path_buf(), actual));
        Ok(())
    }

    pub fn output(&mut self, role: &str, file: &Path) {
        self.outputs.push((role.to_string(), file.to_path_buf()));
    }

    pub fn finish(self, command: &str, seed: u64, config: &str) -> Result<Manifest, CliError> {
        let base = dir_of(&self.path);
        let inputs = self
            .inputs
            .into_iter()
            .map(|(role, p, sha256)| {
                (
                    role,
                    FileDigest {
                        path: relative_to(&p, &base),
                        sha256,
                    },
                )
            })
            .collect();
        let mut outputs = BTreeMap::new();
        for (role, p) in self.outputs {
            let sha256 = file_sha256(&p)?;
            outputs.insert(
                role,
                FileDigest {
                    path: relative_to(&p, &base),
                    sha256,
                },
            );
        }
        let m = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config.to_string(),
            config_sha256: sha256_hex(config.as_bytes()),
            inputs,
            outputs,
        };
        m.save(&self.path)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_manifest_name() {
        assert_eq!(
            manifest_for_file(Path::new("out/data.csv")),
            Path::new("out/data.csv.manifest.json")
        );
    }
}
