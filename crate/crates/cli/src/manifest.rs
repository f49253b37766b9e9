use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::unlearn::Method;

use crate::config::ExperimentConfig;
use crate::pipeline::{dataset_hash, file_hash, RunReport};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub cache_key: String,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub method: Method,
    pub report: PathBuf,
    pub report_hash: String,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminated: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub message: String,
}

/// Everything needed to trace a result back to its inputs. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub name: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset: Option<PathBuf>,
    pub dataset_hash: Option<String>,
    pub pretrain: Option<PretrainRecord>,
    pub vanilla_report: Option<PathBuf>,
    pub vanilla_report_hash: Option<String>,
    pub runs: Vec<RunRecord>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub events: Vec<String>,
    pub failure: Option<FailureRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, config_hash: String, started: f64) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            name: config.name.clone(),
            config: config.clone(),
            config_hash,
            dataset: None,
            dataset_hash: None,
            pretrain: None,
            vanilla_report: None,
            vanilla_report_hash: None,
            runs: Vec::new(),
            started_unix: started,
            finished_unix: started,
            events: Vec::new(),
            failure: None,
        }
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl LoadedManifest {
    /// Accepts the manifest file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = fs::read(&file).map_err(|e| CliError::io(&file, e))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::SchemaMismatch {
                path: file,
                found,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok(Self {
            dir: file.parent().map(Path::to_path_buf).unwrap_or_default(),
            manifest: serde_json::from_value(raw)?,
        })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn report(&self, rel: &Path) -> Result<RunReport, CliError> {
        let p = self.path(rel);
        Ok(serde_json::from_slice(&fs::read(&p).map_err(|e| CliError::io(&p, e))?)?)
    }

    /// Vanilla first, then each run in order.
    pub fn reports(&self) -> Result<Vec<RunReport>, CliError> {
        let m = &self.manifest;
        let mut out = Vec::new();
        if let Some(v) = &m.vanilla_report {
            out.push(self.report(v)?);
        }
        for r in &m.runs {
            out.push(self.report(&r.report)?);
        }
        Ok(out)
    }

    /// Recomputes every recorded hash.
    pub fn verify(&self) -> Result<(), CliError> {
        let m = &self.manifest;
        let check = |path: PathBuf, expected: &str, hash: fn(&Path) -> Result<String, CliError>| {
            let found = hash(&path)?;
            if found == expected {
                Ok(())
            } else {
                Err(CliError::HashMismatch {
                    path,
                    expected: expected.into(),
                    found,
                })
            }
        };
        if let (Some(p), Some(h)) = (&m.dataset, &m.dataset_hash) {
            check(self.path(p), h, dataset_hash)?;
        }
        if let Some(p) = &m.pretrain {
            check(self.path(&p.checkpoint), &p.checkpoint_hash, file_hash)?;
        }
        if let (Some(p), Some(h)) = (&m.vanilla_report, &m.vanilla_report_hash) {
            check(self.path(p), h, file_hash)?;
        }
        for r in &m.runs {
            check(self.path(&r.report), &r.report_hash, file_hash)?;
            check(self.path(&r.checkpoint), &r.checkpoint_hash, file_hash)?;
        }
        Ok(())
    }
}
