//! Output-directory bookkeeping: atomic writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Dataset,
    Model,
    Genotype,
    Alpha,
    Trace,
    Failures,
    Selection,
    Report,
    Timings,
    Config,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Index of everything written into one output directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<String>,
    pub out_dir: String,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn find(&self, file: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == file)
    }

    /// Checks that every listed artifact exists and matches its hash.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for a in &self.artifacts {
            let path = dir.join(&a.path);
            if !path.exists() {
                return Err(CliError::MissingFile(path));
            }
            check_hash(&path, &a.sha256)?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn check_hash(path: &Path, expected: &str) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

/// Reads an input file. When a manifest sits beside it and lists it, the
/// content must match the recorded hash.
pub fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    if let (Some(manifest), Some(name)) = (RunManifest::load(dir)?, path.file_name()) {
        if let Some(a) = manifest.find(&name.to_string_lossy()) {
            let actual = sha256_hex(&bytes);
            if actual != a.sha256 {
                return Err(CliError::HashMismatch {
                    path: path.to_path_buf(),
                    expected: a.sha256.clone(),
                    actual,
                });
            }
        }
    }
    Ok(bytes)
}

pub fn read_input_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_input(path)?).map_err(|_| CliError::Format(format!("{} is not utf-8 text", path.display())))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Collects the artifacts of one subcommand and commits them under `dir`.
/// Nothing is renamed into place until every artifact has been produced.
pub struct OutputDir {
    dir: PathBuf,
    config: Option<String>,
    pending: Vec<(ArtifactKind, String, Vec<u8>)>,
}

impl OutputDir {
    pub fn new(dir: &Path, config: Option<&Path>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            config: config.map(|p| p.display().to_string()),
            pending: Vec::new(),
        }
    }

    pub fn add(&mut self, kind: ArtifactKind, file: &str, bytes: impl Into<Vec<u8>>) {
        self.pending.push((kind, file.to_string(), bytes.into()));
    }

    /// Writes the artifacts, then the merged manifest.
    pub fn commit(self) -> Result<RunManifest, CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let mut manifest = RunManifest::load(&self.dir)?.unwrap_or_default();
        manifest.out_dir = self.dir.display().to_string();
        if self.config.is_some() {
            manifest.config = self.config.clone();
        }
        for (kind, file, bytes) in &self.pending {
            write_atomic(&self.dir.join(file), bytes)?;
            let entry = Artifact {
                kind: *kind,
                path: file.clone(),
                sha256: sha256_hex(bytes),
            };
            match manifest.artifacts.iter_mut().find(|a| a.path == *file) {
                Some(a) => *a = entry,
                None => manifest.artifacts.push(entry),
            }
        }
        manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
        Ok(manifest)
    }
}
