use std::io;
use std::path::{Path, PathBuf};

use cfdarts::coreset::CoresetError;
use cfdarts::corruption::CorruptionError;
use cfdarts::data::DataError;
use cfdarts::pipeline::PipelineError;
use cfdarts::searchspace::SearchSpaceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed config {}: {reason}", path.display())]
    Config { path: PathBuf, reason: String },
    #[error("hash mismatch for {}: manifest says {expected}, file has {actual}", path.display())]
    HashMismatch { path: PathBuf, expected: String, actual: String },
    #[error("malformed run manifest {0}")]
    Manifest(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("report not found in {}", .0.display())]
    NoReport(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Coreset(#[from] CoresetError),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
