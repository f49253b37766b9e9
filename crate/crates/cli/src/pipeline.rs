use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::data::{
    generate_benchmark, save_dataset, vocab_path, EncodedExample, ScopedDataset, Split,
    ROBUSTNESS_PREFIX,
};
use unlearn_core::eval::{comparison_csv, comparison_table, efficiency_probe, EvalSplits, MetricsReport};
use unlearn_core::model::{load_checkpoint, save_checkpoint, LanguageModel};
use unlearn_core::unlearn::{pretrain, unlearn, PretrainReport, RetainSource, UnlearnReport};

use crate::compare::table_rows;
use crate::config::{ExperimentConfig, RunSpec};
use crate::manifest::{FailureRecord, PretrainRecord, RunManifest, RunRecord, MANIFEST_FILE};
use crate::CliError;

/// Report name of the pretrained, not-yet-unlearned model.
pub const VANILLA: &str = "vanilla";

/// What gets written for every evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlearn: Option<UnlearnReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Hash over the dataset file followed by its vocabulary file.
pub fn dataset_hash(path: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(fs::read(path).map_err(|e| CliError::io(path, e))?);
    let vp = vocab_path(path);
    h.update(fs::read(&vp).map_err(|e| CliError::io(&vp, e))?);
    Ok(hex::encode(h.finalize()))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn rel(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

/// Encoded splits of a generated benchmark.
pub struct Splits {
    pub dataset: ScopedDataset,
    pub unlearn: Vec<EncodedExample>,
    pub retention: Vec<EncodedExample>,
    pub ood: Vec<EncodedExample>,
    pub general: Vec<EncodedExample>,
    pub prefix: Vec<usize>,
}

impl Splits {
    pub fn new(dataset: ScopedDataset) -> Result<Self, CliError> {
        Ok(Self {
            unlearn: dataset.encode(Split::Unlearn)?,
            retention: dataset.encode(Split::Retention)?,
            ood: dataset.encode(Split::Ood)?,
            general: dataset.encode(Split::General)?,
            prefix: dataset.vocab.encode(ROBUSTNESS_PREFIX)?,
            dataset,
        })
    }

    pub fn pretrain_examples(&self, config: &ExperimentConfig) -> Vec<EncodedExample> {
        let mut all = self.unlearn.clone();
        all.extend(self.retention.iter().cloned());
        if config.pretrain.include_ood {
            all.extend(self.ood.iter().cloned());
        }
        if config.pretrain.include_general {
            all.extend(self.general.iter().cloned());
        }
        all
    }

    pub fn retain(&self, source: RetainSource) -> Option<&[EncodedExample]> {
        match source {
            RetainSource::Id => Some(&self.retention),
            RetainSource::Ood => Some(&self.ood),
            RetainSource::None => None,
        }
    }

    pub fn eval_splits(&self, robustness: bool) -> EvalSplits<'_> {
        EvalSplits {
            unlearn: &self.unlearn,
            retention: &self.retention,
            general: (!self.general.is_empty()).then_some(&self.general[..]),
            prefix: robustness.then_some(&self.prefix[..]),
            vocab: Some(&self.dataset.vocab),
        }
    }
}

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

pub struct GenerateOutput {
    pub splits: Splits,
    pub path: PathBuf,
    pub hash: String,
}

pub fn generate_stage(config: &ExperimentConfig, layout: &Layout) -> Result<GenerateOutput, CliError> {
    mkdir(&layout.root)?;
    let dataset = generate_benchmark(&config.data.to_params())?;
    let path = layout.dataset();
    save_dataset(&dataset, &path)?;
    let hash = dataset_hash(&path)?;
    Ok(GenerateOutput {
        splits: Splits::new(dataset)?,
        path,
        hash,
    })
}

pub struct PretrainOutput {
    pub model: LanguageModel<f32>,
    pub record: PretrainRecord,
    pub report: Option<PretrainReport>,
}

/// Content address of a pretrained checkpoint.
pub fn pretrain_key(config: &ExperimentConfig, vocab_size: usize, dataset_hash: &str) -> Result<String, CliError> {
    let key = serde_json::json!({
        "model": config.model.to_model_config(vocab_size),
        "dataset": dataset_hash,
        "pretrain": config.pretrain,
        "prefix": ROBUSTNESS_PREFIX,
    });
    Ok(sha256_hex(&serde_json::to_vec(&key)?))
}

/// Pretrains, or reuses a cached checkpoint with the same content address
/// whose recorded hash still matches.
pub fn pretrain_stage(
    config: &ExperimentConfig,
    layout: &Layout,
    data: &GenerateOutput,
    events: &mut Vec<String>,
) -> Result<PretrainOutput, CliError> {
    let cache = layout.cache();
    mkdir(&cache)?;
    let vocab_size = data.splits.dataset.vocab.len();
    let key = pretrain_key(config, vocab_size, &data.hash)?;
    let ckpt = cache.join(format!("pretrain-{key}.ckpt"));
    let sidecar = cache.join(format!("pretrain-{key}.sha256"));
    let report_path = cache.join(format!("pretrain-{key}.json"));

    if ckpt.exists() {
        let recorded = fs::read_to_string(&sidecar).unwrap_or_default();
        let actual = file_hash(&ckpt)?;
        if recorded.trim() == actual {
            let model = load_checkpoint(&ckpt)?;
            let report = fs::read(&report_path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok());
            events.push(format!("pretrain cache hit {key}"));
            return Ok(PretrainOutput {
                model,
                record: PretrainRecord {
                    cache_key: key,
                    checkpoint: rel(&layout.root, &ckpt),
                    checkpoint_hash: actual,
                    cache_hit: true,
                },
                report,
            });
        }
        events.push(format!(
            "pretrain cache hash mismatch for {key} (recorded {:?}, found {actual}); re-running",
            recorded.trim()
        ));
    }

    let mut model = LanguageModel::init(config.model.to_model_config(vocab_size))?;
    let examples = data.splits.pretrain_examples(config);
    let report = pretrain(
        &mut model,
        &examples,
        &config.pretrain.to_config(),
        &data.splits.prefix,
    )?;
    save_checkpoint(&model, &ckpt)?;
    let hash = file_hash(&ckpt)?;
    write_atomic(&sidecar, hash.as_bytes())?;
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    events.push(format!(
        "pretrained {} epochs, final loss {:.4}",
        report.epochs,
        report.final_loss.unwrap_or(f64::NAN)
    ));
    Ok(PretrainOutput {
        model,
        record: PretrainRecord {
            cache_key: key,
            checkpoint: rel(&layout.root, &ckpt),
            checkpoint_hash: hash,
            cache_hit: false,
        },
        report: Some(report),
    })
}

/// Evaluates `model` and writes its report.
pub fn evaluate_stage(
    config: &ExperimentConfig,
    layout: &Layout,
    splits: &Splits,
    model: &LanguageModel<f32>,
    name: &str,
    method: &str,
    echo: serde_json::Value,
    unlearn_report: Option<UnlearnReport>,
) -> Result<(RunReport, PathBuf), CliError> {
    let timing = unlearn_report
        .as_ref()
        .filter(|r| !r.step_seconds.is_empty())
        .and_then(|r| efficiency_probe(&r.step_seconds, r.peak_bytes).ok());
    let metrics = MetricsReport::evaluate(model, splits.eval_splits(config.eval.robustness), method, echo)?
        .with_timing(timing);
    let report = RunReport {
        name: name.to_string(),
        metrics,
        unlearn: unlearn_report,
    };
    let path = layout.report(name);
    mkdir(path.parent().expect("report dir"))?;
    write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
    Ok((report, path))
}

/// Unlearns a copy of `vanilla` with one run's settings, then evaluates it.
pub fn run_stage(
    config: &ExperimentConfig,
    layout: &Layout,
    splits: &Splits,
    vanilla: &LanguageModel<f32>,
    run: &RunSpec,
) -> Result<(RunRecord, RunReport), CliError> {
    let uc = run.unlearn_config(config.seed)?;
    let mut model = vanilla.clone();
    let retain = if uc.uses_retain() {
        splits.retain(uc.retain_source)
    } else {
        None
    };
    let report = unlearn(&mut model, &splits.unlearn, retain, &uc)?;
    let ckpt = layout.checkpoint(&run.name);
    mkdir(ckpt.parent().expect("checkpoint dir"))?;
    save_checkpoint(&model, &ckpt)?;
    let echo = serde_json::to_value(&uc)?;
    let (rr, path) = evaluate_stage(config, layout, splits, &model, &run.name, uc.method.label(), echo, Some(report))?;
    let record = RunRecord {
        name: run.name.clone(),
        method: uc.method,
        report: rel(&layout.root, &path),
        report_hash: file_hash(&path)?,
        checkpoint: rel(&layout.root, &ckpt),
        checkpoint_hash: file_hash(&ckpt)?,
        terminated: rr.unlearn.as_ref().and_then(|u| u.terminated.clone()),
    };
    Ok((record, rr))
}

/// Options that do not change results.
#[derive(Default)]
pub struct Hooks<'a> {
    pub progress: Option<&'a mut dyn FnMut(&str)>,
}

impl Hooks<'_> {
    fn say(&mut self, msg: &str) {
        if let Some(p) = self.progress.as_mut() {
            p(msg);
        }
    }
}

/// Stages to execute; later stages imply earlier ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stages {
    Generate,
    Pretrain,
    /// Pretrain, evaluate the vanilla model, then these runs (all when
    /// `None`).
    Full(Option<Vec<String>>),
}

/// Runs the pipeline and writes `manifest.json`. On failure the manifest
/// is still written, with the failing stage recorded, and the error is
/// returned.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out: &Path,
    stages: Stages,
    mut hooks: Hooks<'_>,
) -> Result<RunManifest, CliError> {
    let layout = Layout::new(out);
    mkdir(&layout.root)?;
    let config_json = serde_json::to_value(config)?;
    let mut manifest = RunManifest::new(config, sha256_hex(&serde_json::to_vec(&config_json)?), now());

    let result = execute(config, &layout, &stages, &mut manifest, &mut hooks);
    manifest.finished_unix = now();
    if let Err((stage, e)) = &result {
        manifest.failure = Some(FailureRecord {
            stage: stage.clone(),
            message: e.to_string(),
        });
    }
    write_atomic(&layout.manifest(), &serde_json::to_vec_pretty(&manifest)?)?;
    match result {
        Ok(()) => Ok(manifest),
        Err((stage, e)) => Err(CliError::Stage {
            stage,
            source: Box::new(e),
        }),
    }
}

fn execute(
    config: &ExperimentConfig,
    layout: &Layout,
    stages: &Stages,
    manifest: &mut RunManifest,
    hooks: &mut Hooks<'_>,
) -> Result<(), (String, CliError)> {
    let tag = |stage: &str| {
        let stage = stage.to_string();
        move |e: CliError| (stage.clone(), e)
    };
    hooks.say("generating benchmark");
    let data = generate_stage(config, layout).map_err(tag("generate"))?;
    manifest.dataset = Some(rel(&layout.root, &data.path));
    manifest.dataset_hash = Some(data.hash.clone());
    if *stages == Stages::Generate {
        return Ok(());
    }

    hooks.say("pretraining");
    let pre = pretrain_stage(config, layout, &data, &mut manifest.events).map_err(tag("pretrain"))?;
    manifest.pretrain = Some(pre.record.clone());
    let Stages::Full(selected) = stages else {
        return Ok(());
    };

    hooks.say("evaluating vanilla model");
    let (vanilla, path) = evaluate_stage(
        config,
        layout,
        &data.splits,
        &pre.model,
        VANILLA,
        "Vanilla",
        serde_json::to_value(&config.pretrain).map_err(|e| ("eval".to_string(), e.into()))?,
        None,
    )
    .map_err(tag("eval:vanilla"))?;
    manifest.vanilla_report = Some(rel(&layout.root, &path));
    manifest.vanilla_report_hash = Some(file_hash(&path).map_err(tag("eval:vanilla"))?);
    let mut reports = vec![vanilla];

    for run in &config.runs {
        if selected.as_ref().is_some_and(|s| !s.contains(&run.name)) {
            continue;
        }
        hooks.say(&format!("run {}", run.name));
        let (record, report) =
            run_stage(config, layout, &data.splits, &pre.model, run).map_err(tag(&format!("run:{}", run.name)))?;
        if let Some(t) = &record.terminated {
            manifest.events.push(format!("run {} terminated early: {t}", run.name));
        }
        hooks.say(&format!(
            "run {}: unlearn {:.3} retention {:.3}",
            run.name, report.metrics.unlearn_success, report.metrics.retention_success
        ));
        manifest.runs.push(record);
        reports.push(report);
    }
    if let Some(s) = selected {
        if let Some(missing) = s.iter().find(|n| config.run(n).is_none()) {
            return Err(("run".into(), CliError::Config(format!("no run named {missing:?}"))));
        }
    }
    write_tables(layout, &reports).map_err(tag("tables"))
}

/// Writes `table.txt` and `table.csv` under the output root.
pub fn write_tables(layout: &Layout, reports: &[RunReport]) -> Result<(), CliError> {
    let rows = table_rows(reports);
    write_atomic(&layout.root.join("table.txt"), comparison_table(&rows).as_bytes())?;
    write_atomic(&layout.root.join("table.csv"), comparison_csv(&rows).as_bytes())
}

