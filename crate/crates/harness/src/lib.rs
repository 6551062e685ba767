//! Experiment harness: corpus generation, two-stage training, evaluation,
//! ablation sweeps and attention dumps.

pub mod attention;
pub mod config;
pub mod data;
pub mod eval;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("state error: {0}")]
    State(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] soba_core::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] soba_core::model::ModelError),
    #[error(transparent)]
    Tensor(#[from] soba_core::TensorError),
    #[error(transparent)]
    Loss(#[from] soba_core::loss::LossError),
    #[error(transparent)]
    Metrics(#[from] soba_core::metrics::MetricsError),
    #[error(transparent)]
    Qa(#[from] soba_core::qa::QaError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Writes a file, creating parent directories.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
