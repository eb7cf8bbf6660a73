//! Atomic file output and the per-directory artifact manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so `path` is either absent, the old content, or complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestFile {
    artifacts: BTreeMap<String, ArtifactEntry>,
}

/// Output directory whose files are all listed, with content hashes, in
/// `run_manifest.json`. Entries from earlier commands are kept.
pub struct Artifacts {
    dir: PathBuf,
    manifest: ManifestFile,
}

impl Artifacts {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        let manifest = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            ManifestFile::default()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Atomically writes `rel` under the directory and records its hash.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        write_atomic(&path, bytes)?;
        self.manifest.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn entries(&self) -> &BTreeMap<String, ArtifactEntry> {
        &self.manifest.artifacts
    }

    /// Rewrites the manifest; call after the command's last artifact.
    pub fn finish(self) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(RUN_MANIFEST);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
