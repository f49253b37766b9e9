use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use unlearn_cli::compare::{compare, inspect_mask};
use unlearn_cli::config::ExperimentConfig;
use unlearn_cli::manifest::LoadedManifest;
use unlearn_cli::pipeline::{run_pipeline, write_atomic, Hooks, Splits, Stages};
use unlearn_core::data::load_dataset;
use unlearn_core::eval::{comparison_table, MetricsReport, TableRow};
use unlearn_core::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Localized unlearning experiments on a synthetic author benchmark")]
struct Cli {
    /// Experiment config (TOML); the bundled default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record per-step wall-clock timing (reports stop being byte-identical).
    #[arg(long, global = true)]
    timing: bool,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark and write dataset.jsonl.
    Generate,
    /// Generate, then pretrain (or reuse the cached vanilla model).
    Pretrain,
    /// Pretrain, then execute the named runs.
    Unlearn {
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
    },
    /// Evaluate a checkpoint against the dataset in the output directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// The whole pipeline: every configured run plus the comparison table.
    Run,
    /// One table across several output directories or manifests.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-module cosine, magnitude and selection of a MemFlex run.
    InspectMask {
        manifest: PathBuf,
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Print the resolved config.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_experiment(),
    };
    if let Some(s) = cli.seed {
        c = c.override_seed(s).resolved()?;
    }
    if cli.timing {
        c = c.enable_timing();
    }
    Ok(c)
}

fn out_dir(cli: &Cli, c: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| c.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&c.name))
}

fn pipeline(cli: &Cli, stages: Stages) -> Result<()> {
    let config = load_config(cli)?;
    let out = out_dir(cli, &config);
    let quiet = cli.quiet;
    let mut say = |m: &str| {
        if !quiet {
            eprintln!("[{}] {m}", config.name);
        }
    };
    let hooks = Hooks {
        progress: Some(&mut say),
    };
    let full = matches!(stages, Stages::Full(_));
    let manifest = run_pipeline(&config, &out, stages, hooks)?;
    for e in &manifest.events {
        eprintln!("{e}");
    }
    if full {
        let table = std::fs::read_to_string(out.join("table.txt")).context("reading table")?;
        print!("{table}");
    }
    eprintln!("manifest: {}", out.join(unlearn_cli::manifest::MANIFEST_FILE).display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate => pipeline(&cli, Stages::Generate),
        Command::Pretrain => pipeline(&cli, Stages::Pretrain),
        Command::Unlearn { runs } => pipeline(&cli, Stages::Full(Some(runs.clone()))),
        Command::Run => pipeline(&cli, Stages::Full(None)),
        Command::Eval { checkpoint, report } => {
            let config = load_config(&cli)?;
            let out = out_dir(&cli, &config);
            let dataset = out.join("dataset.jsonl");
            let ds = load_dataset(&dataset)
                .with_context(|| format!("loading {} (run `generate` first)", dataset.display()))?;
            let splits = Splits::new(ds)?;
            let model = load_checkpoint(checkpoint)?;
            let metrics = MetricsReport::evaluate(
                &model,
                splits.eval_splits(config.eval.robustness),
                "Checkpoint",
                serde_json::json!({ "checkpoint": checkpoint }),
            )?;
            let json = serde_json::to_vec_pretty(&metrics)?;
            match report {
                Some(p) => write_atomic(p, &json)?,
                None => println!("{}", String::from_utf8(json)?),
            }
            let name = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            eprint!("{}", comparison_table(&[TableRow::new(name, &metrics)]));
            Ok(())
        }
        Command::Compare { manifests, csv } => {
            let loaded = manifests
                .iter()
                .map(|p| LoadedManifest::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            for m in &loaded {
                if let Some(f) = &m.manifest.failure {
                    eprintln!("warning: {} failed at stage {}: {}", m.dir.display(), f.stage, f.message);
                }
            }
            let cmp = compare(&loaded)?;
            if cmp.rows.is_empty() {
                bail!("no reports to compare");
            }
            print!("{}", cmp.text);
            if let Some(p) = csv {
                write_atomic(p, cmp.csv.as_bytes())?;
            }
            Ok(())
        }
        Command::InspectMask { manifest, run, json } => {
            let view = inspect_mask(&LoadedManifest::load(manifest)?, run.as_deref())?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&view)?);
            } else {
                print!("{}", view.render());
            }
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", load_config(&cli)?.to_toml()?);
            Ok(())
        }
    }
}
