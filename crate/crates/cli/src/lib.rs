//! Experiment runner: TOML configs, a cached generate/pretrain/unlearn/eval
//! pipeline, run manifests and comparison tables.

pub mod compare;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::path::{Path, PathBuf};

use thiserror::Error;
use unlearn_core::data::DataError;
use unlearn_core::eval::EvalError;
use unlearn_core::model::ModelError;
use unlearn_core::unlearn::UnlearnError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        source: Box<CliError>,
    },
    #[error("{path}: manifest schema {found}, expected {expected}")]
    SchemaMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("run name {0:?} appears in more than one manifest")]
    NameCollision(String),
    #[error("manifest has no MemFlex run{0}")]
    NoMemFlex(String),
    #[error("{path}: hash {found} does not match recorded {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
