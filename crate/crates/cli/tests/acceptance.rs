//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=1,7` restricts the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use unlearn_cli::config::ExperimentConfig;
use unlearn_cli::manifest::LoadedManifest;
use unlearn_cli::pipeline::{run_pipeline, Hooks, RunReport, Stages, VANILLA};
use unlearn_core::autodiff::{grad_check, Graph, LossTarget};
use unlearn_core::data::{generate_benchmark, Attribute, BenchmarkParams, EncodedExample, Split, ROBUSTNESS_PREFIX};
use unlearn_core::eval::{perplexity, retention_success, unlearn_success};
use unlearn_core::model::{CausalLm, LanguageModel, ModelConfig, ModelError, PackedBatch, TokenSequence};
use unlearn_core::unlearn::{memflex_with_mask, pretrain, unlearn, Method, PretrainConfig, RetainSource, UnlearnConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const PLANTED_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const VANILLA_MAX_UL: f64 = 0.05;
const VANILLA_MIN_RT: f64 = 0.95;
const PRETRAIN_SECONDS: f64 = 600.0;
const GA_MIN_UL: f64 = 0.90;
const GA_MAX_RT: f64 = 0.20;
const GA_MIN_RT_PPL: f64 = 1e3;
const MARGIN_OVER_GD: f64 = 0.03;
const MARGIN_OVER_GA: f64 = 0.15;
const DROP_RATIO: f64 = 0.5;
const STEP_RATIO: f64 = 0.95;
const JACCARD_FACTOR: f64 = 2.0;
const PLANTED_MIN_SEEDS: usize = 4;
const PLANTED: [&str; 2] = ["layers.1.mlp.up", "layers.1.mlp.down"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- 1

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        context_length: 12,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_hidden: 32,
        seed: 7,
        init_std: 0.2,
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = tiny_config();
    let model = LanguageModel::<f32>::init(config.clone()).unwrap().cast::<f64>();
    let seqs: [&[usize]; 2] = [&[1, 5, 9, 2, 14, 3, 7], &[4, 4, 11, 0, 6]];
    let batch = PackedBatch::new(seqs);
    let targets: Vec<LossTarget<f64>> = batch
        .segments
        .iter()
        .flat_map(|s| (s.start..s.start + s.len - 1).map(|r| (r, batch.tokens[r + 1])))
        .map(|(row, token)| LossTarget { row, token, weight: 1.0 / 10.0 })
        .collect();
    let loss = |g: &mut Graph<f64>, p: &unlearn_core::autodiff::ParamSet<f64>| {
        let m = LanguageModel::<f64>::from_params(config.clone(), p.clone()).expect("params match config");
        let logits = m.forward_packed(g, &batch, |_| true).expect("batch fits the model");
        g.cross_entropy(logits, &targets)
    };
    let err = grad_check(loss, model.params(), 64, 1e-5, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err <= GRAD_TOL && secs < GRAD_SECONDS,
        format!("max relative error {err:.2e} (<= {GRAD_TOL:e}) over 64 coordinates in {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2-6, 9

struct SeedRun {
    seed: u64,
    pretrain_seconds: f64,
    reports: BTreeMap<String, RunReport>,
    config: ExperimentConfig,
}

impl SeedRun {
    fn get(&self, name: &str) -> &RunReport {
        &self.reports[name]
    }
}

fn benchmark_runs() -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let config = ExperimentConfig::default_experiment()
                .override_seed(seed)
                .enable_timing()
                .resolved()
                .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let mut marks: Vec<(String, Instant)> = Vec::new();
            let mut progress = |m: &str| {
                eprintln!("  [seed {seed}] {m}");
                marks.push((m.to_string(), Instant::now()));
            };
            let start = Instant::now();
            run_pipeline(
                &config,
                dir.path(),
                Stages::Full(None),
                Hooks {
                    progress: Some(&mut progress),
                },
            )
            .unwrap();
            let at = |label: &str| marks.iter().find(|(m, _)| m == label).map(|(_, t)| *t).unwrap();
            let pretrain_seconds = (at("evaluating vanilla model") - at("pretraining")).as_secs_f64();
            eprintln!("  [seed {seed}] done in {:.0}s", start.elapsed().as_secs_f64());
            let loaded = LoadedManifest::load(dir.path()).unwrap();
            let reports = loaded.reports().unwrap().into_iter().map(|r| (r.name.clone(), r)).collect();
            SeedRun {
                seed,
                pretrain_seconds,
                reports,
                config,
            }
        })
        .collect()
}

fn vanilla_analog(runs: &[SeedRun]) -> Outcome {
    let ul: Vec<f64> = runs.iter().map(|r| r.get(VANILLA).metrics.unlearn_success).collect();
    let rt: Vec<f64> = runs.iter().map(|r| r.get(VANILLA).metrics.retention_success).collect();
    let secs: Vec<f64> = runs.iter().map(|r| r.pretrain_seconds).collect();
    let pass = ul.iter().all(|&u| u <= VANILLA_MAX_UL)
        && rt.iter().all(|&r| r >= VANILLA_MIN_RT)
        && secs.iter().all(|&s| s < PRETRAIN_SECONDS);
    outcome(
        pass,
        format!(
            "per seed: unlearn {} (<= {VANILLA_MAX_UL}), retention {} (>= {VANILLA_MIN_RT}), pretrain {}s (< {PRETRAIN_SECONDS})",
            fmt(&ul),
            fmt(&rt),
            secs.iter().map(|s| format!("{s:.0}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn ga_collapse(runs: &[SeedRun]) -> Outcome {
    let ul = median(runs.iter().map(|r| r.get("ga").metrics.unlearn_success).collect());
    let rt = median(runs.iter().map(|r| r.get("ga").metrics.retention_success).collect());
    let bits = median(runs.iter().map(|r| r.get("ga").metrics.retention_ppl.mean_bits).collect());
    let pass = ul >= GA_MIN_UL && rt <= GA_MAX_RT && bits >= GA_MIN_RT_PPL.log2();
    outcome(
        pass,
        format!(
            "median over seeds: unlearn {ul:.3} (>= {GA_MIN_UL}), retention {rt:.3} (<= {GA_MAX_RT}), retention ppl 2^{bits:.1} (>= {GA_MIN_RT_PPL:e})"
        ),
    )
}

fn avg(runs: &[SeedRun], name: &str) -> Vec<f64> {
    runs.iter().map(|r| r.get(name).metrics.avg_success).collect()
}

fn differentiation(runs: &[SeedRun]) -> Outcome {
    let (mf, gd, ga) = (avg(runs, "memflex"), avg(runs, "ga-gd-id"), avg(runs, "ga"));
    let (m_mf, m_gd, m_ga) = (median(mf.clone()), median(gd.clone()), median(ga.clone()));
    outcome(
        m_mf >= m_gd + MARGIN_OVER_GD && m_mf >= m_ga + MARGIN_OVER_GA,
        format!(
            "median avg success: MemFlex {m_mf:.3} [{}], GA+GD {m_gd:.3} [{}] (+{MARGIN_OVER_GD}), GA {m_ga:.3} [{}] (+{MARGIN_OVER_GA})",
            fmt(&mf),
            fmt(&gd),
            fmt(&ga)
        ),
    )
}

fn general_drop(r: &SeedRun, name: &str) -> f64 {
    let g = |n: &str| r.get(n).metrics.general_proxy_acc.expect("general split evaluated");
    g(VANILLA) - g(name)
}

fn collateral(runs: &[SeedRun]) -> Outcome {
    let mf: Vec<f64> = runs.iter().map(|r| general_drop(r, "memflex")).collect();
    let ga: Vec<f64> = runs.iter().map(|r| general_drop(r, "ga")).collect();
    let (m_mf, m_ga) = (median(mf.clone()), median(ga.clone()));
    outcome(
        m_mf <= DROP_RATIO * m_ga,
        format!(
            "median general-proxy drop: MemFlex {m_mf:.3} [{}] vs GA {m_ga:.3} [{}] (ratio limit {DROP_RATIO})",
            fmt(&mf),
            fmt(&ga)
        ),
    )
}

fn efficiency(runs: &[SeedRun]) -> Outcome {
    let mut same_settings = true;
    let mut ratios = Vec::new();
    for r in runs {
        let cfg = |n: &str| r.config.run(n).unwrap().unlearn_config(r.seed).unwrap();
        let (a, b) = (cfg("memflex"), cfg("ga-gd-id"));
        same_settings &= a.batch_size == b.batch_size && a.accum_steps == b.accum_steps && a.epochs == b.epochs;
        let t = |n: &str| r.get(n).metrics.timing.expect("timing enabled").seconds_per_step;
        ratios.push(t("memflex") / t("ga-gd-id"));
    }
    let m = median(ratios.clone());
    outcome(
        same_settings && m <= STEP_RATIO,
        format!(
            "median seconds/step ratio MemFlex / GA+GD {m:.3} [{}] (<= {STEP_RATIO}), same batch/accumulation: {same_settings}",
            fmt(&ratios)
        ),
    )
}

fn robustness(runs: &[SeedRun]) -> Outcome {
    let delta = |n: &str| -> Vec<f64> {
        runs.iter()
            .map(|r| r.get(n).metrics.robustness.as_ref().expect("robustness evaluated").retention.delta)
            .collect()
    };
    let (mf, gd) = (delta("memflex"), delta("ga-gd-id"));
    let m_mf = median(mf.iter().map(|d| d.abs()).collect());
    let m_gd = median(gd.iter().map(|d| d.abs()).collect());
    outcome(
        m_mf < m_gd,
        format!(
            "median |retention delta| with prefix {ROBUSTNESS_PREFIX:?}: MemFlex {m_mf:.3} [{}] vs GA+GD {m_gd:.3} [{}]",
            fmt(&mf),
            fmt(&gd)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Expected Jaccard index between a fixed set of size `p` and a uniformly
/// random subset of size `s`, both drawn from `n` items.
fn random_mask_jaccard(n: usize, p: usize, s: usize) -> f64 {
    let lo = (p + s).saturating_sub(n);
    (lo..=p.min(s))
        .map(|k| {
            let prob = (ln_choose(p, k) + ln_choose(n - p, s - k) - ln_choose(n, s)).exp();
            prob * k as f64 / (p + s - k) as f64
        })
        .sum()
}

fn planted_trial(seed: u64) -> (f64, f64, f64, BTreeSet<String>) {
    let ds = generate_benchmark(&BenchmarkParams {
        seed,
        n_instances: 20,
        ..Default::default()
    })
    .unwrap();
    let enc = |s| ds.encode(s).unwrap();
    let (forget, retention, ood, general) = (enc(Split::Unlearn), enc(Split::Retention), enc(Split::Ood), enc(Split::General));
    let prefix = ds.vocab.encode(ROBUSTNESS_PREFIX).unwrap();
    let mut model = LanguageModel::init(ModelConfig {
        vocab_size: ds.vocab.len(),
        seed,
        ..Default::default()
    })
    .unwrap();
    // Phase one trains every module on all splits, but with each forget
    // answer rotated to another example of the same attribute: every token
    // is learned, the true forget mapping is not. Phase two then teaches
    // the true answers through the planted modules alone.
    let mut rotated = forget.clone();
    for attr in forget.iter().map(|e| e.attribute).collect::<BTreeSet<_>>() {
        let idx: Vec<usize> = (0..forget.len()).filter(|&i| forget[i].attribute == attr).collect();
        for (k, &i) in idx.iter().enumerate() {
            let donor = &forget[idx[(k + 1) % idx.len()]];
            rotated[i].seq = forget[i].seq.with_answer(donor.seq.answer());
        }
    }
    let others: Vec<EncodedExample> = retention.iter().chain(&ood).chain(&general).cloned().collect();
    let base_cfg = PretrainConfig {
        seed,
        ..Default::default()
    };
    pretrain(&mut model, &[rotated, others.clone()].concat(), &base_cfg, &prefix).unwrap();
    let plant_cfg = PretrainConfig {
        trainable_modules: Some(PLANTED.iter().map(|s| s.to_string()).collect()),
        ..base_cfg
    };
    pretrain(&mut model, &[forget.clone(), others].concat(), &plant_cfg, &prefix).unwrap();
    let planted_recall = 1.0 - unlearn_success(&model, &forget).unwrap();

    let uc = UnlearnConfig {
        epochs: 0,
        ..UnlearnConfig::new(Method::MemFlex).with_seed(seed).with_retain(RetainSource::Id)
    };
    let report = unlearn(&mut model, &forget, Some(&retention), &uc).unwrap();
    let full = report.mask.unwrap();
    for d in full.diagnostics.iter().filter(|d| PLANTED.contains(&d.module.as_str())) {
        eprintln!(
            "  [planted seed {seed}] {}: cosine {:.3} (mu {:.3}), magnitude {:.2e} (sigma {:.2e})",
            d.module, d.cosine, full.mu, d.magnitude, full.sigma
        );
    }
    let mask = full.selected;
    let planted: BTreeSet<String> = PLANTED.iter().map(|s| s.to_string()).collect();
    let inter = mask.intersection(&planted).count() as f64;
    let union = mask.union(&planted).count() as f64;
    let n = model.module_ids().len();
    (inter / union, random_mask_jaccard(n, planted.len(), mask.len()), planted_recall, mask)
}

fn localization_oracle() -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in PLANTED_SEEDS {
        let (j, expected, recall, mask) = planted_trial(seed);
        let ok = j >= JACCARD_FACTOR * expected;
        hits += ok as usize;
        eprintln!("  [planted seed {seed}] recall {recall:.2}, mask {mask:?}, J {j:.3} vs random {expected:.3}");
        lines.push(format!("{j:.2}/{expected:.2}"));
    }
    outcome(
        hits >= PLANTED_MIN_SEEDS,
        format!(
            "{hits}/{} seeds with Jaccard >= {JACCARD_FACTOR}x random-mask expectation (J/expected: {})",
            PLANTED_SEEDS.len(),
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

struct ConstLm<F> {
    vocab: usize,
    f: F,
}

impl<F: Fn(usize) -> Vec<f64>> CausalLm for ConstLm<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn context_length(&self) -> usize {
        64
    }
    fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(tokens.iter().map(|&t| (self.f)(t)).collect())
    }
}

fn toy_examples(n: usize, offset: usize) -> Vec<EncodedExample> {
    (0..n)
        .map(|i| {
            let a = (i * 3 + offset) % 12 + 2;
            let b = (i * 5 + offset) % 12 + 2;
            EncodedExample {
                id: format!("x{offset}-{i}"),
                attribute: Attribute::Name,
                seq: TokenSequence::new(vec![a, b, 0, b, a, 1], 3).unwrap(),
            }
        })
        .collect()
}

fn params_equal(a: &LanguageModel<f32>, b: &LanguageModel<f32>) -> bool {
    a.params().iter().zip(b.params().iter()).all(|((_, x), (_, y))| {
        x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

fn invariants() -> Outcome {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    let forget = toy_examples(6, 0);
    let retain = toy_examples(6, 7);
    let mut base = LanguageModel::init(tiny_config()).unwrap();
    pretrain(
        &mut base,
        &[forget.clone(), retain.clone()].concat(),
        &PretrainConfig { epochs: 30, batch_size: 4, ..Default::default() },
        &[],
    )
    .unwrap();
    let run = |method: Method, tweak: &dyn Fn(&mut UnlearnConfig)| {
        let mut c = UnlearnConfig::new(method).with_seed(3).with_lr(1e-2);
        c.accum_steps = 3;
        if method != Method::Ga {
            c = c.with_retain(RetainSource::Id);
        }
        tweak(&mut c);
        let mut m = base.clone();
        unlearn(&mut m, &forget, Some(&retain), &c).unwrap();
        m
    };

    let ga = run(Method::Ga, &|_| {});
    check("retain_weight=0 equals GA", params_equal(&ga, &run(Method::GaGd, &|c| c.retain_weight = 0.0)));
    check("kl_weight=0 equals GA", params_equal(&ga, &run(Method::GaKl, &|c| c.kl_weight = 0.0)));

    let gd = run(Method::GaGd, &|_| {});
    let mut all = base.clone();
    let mut mc = UnlearnConfig::new(Method::MemFlex).with_seed(3).with_lr(1e-2).with_retain(RetainSource::Id);
    mc.accum_steps = 3;
    let every: BTreeSet<String> = base.module_ids().into_iter().collect();
    memflex_with_mask(&mut all, &forget, &retain, &mc, &every).unwrap();
    check("all-modules mask equals GA+GD", params_equal(&gd, &all));

    let mut masked = base.clone();
    let keep: BTreeSet<String> = ["layers.0.mlp.up".to_string(), "head".to_string()].into();
    memflex_with_mask(&mut masked, &forget, &retain, &mc, &keep).unwrap();
    let frozen_identical = masked.params().iter().zip(base.params().iter()).all(|((id, a), (_, b))| {
        keep.contains(id) || a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    check("unselected modules bit-identical", frozen_identical && !params_equal(&masked, &base));

    for m in [&base, &ga] {
        let ul = unlearn_success(m, &retain).unwrap();
        let rt = retention_success(m, &retain).unwrap();
        check("complement identity", rt.to_bits() == (1.0 - ul).to_bits());
    }

    for v in [2usize, 7, 16, 512] {
        let uniform = ConstLm { vocab: v, f: |_| vec![0.0; v] };
        let ex: Vec<EncodedExample> = vec![EncodedExample {
            id: "u".into(),
            attribute: Attribute::Name,
            seq: TokenSequence::new(vec![0, 1, 1, 0, 1], 2).unwrap(),
        }];
        let p = perplexity(&uniform, &ex).unwrap().value.unwrap();
        check("uniform perplexity equals V", (p - v as f64).abs() <= 1e-9 * v as f64);
    }
    let certain = ConstLm {
        vocab: 5,
        f: |t| (0..5).map(|k| if k == (t + 1) % 5 { 1e3 } else { 0.0 }).collect(),
    };
    let ex = vec![EncodedExample {
        id: "c".into(),
        attribute: Attribute::Name,
        seq: TokenSequence::new(vec![3, 4, 0, 1, 2], 2).unwrap(),
    }];
    let p = perplexity(&certain, &ex).unwrap().value.unwrap();
    check("certain perplexity equals 1", (p - 1.0).abs() <= 1e-9);

    let smoke = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&smoke, a.path(), Stages::Full(None), Hooks::default()).unwrap();
    run_pipeline(&smoke, b.path(), Stages::Full(None), Hooks::default()).unwrap();
    let same = ["reports/vanilla.json", "reports/ga.json", "reports/memflex.json", "table.csv"]
        .iter()
        .all(|rel| fs::read(a.path().join(rel)).unwrap() == fs::read(b.path().join(rel)).unwrap());
    check("report byte determinism", same);

    let pass = failed.is_empty();
    outcome(
        pass,
        if pass {
            "mask bit-identity, reduction laws, complement identity, perplexity cases, byte determinism".into()
        } else {
            format!("violated: {}", failed.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: u32| only.as_ref().is_none_or(|s| s.contains(&i));
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    if want(1) {
        results.push((1, "gradient correctness", gradient_correctness()));
    }
    if want(8) {
        results.push((8, "invariant suite", invariants()));
    }
    if want(7) {
        results.push((7, "localization oracle", localization_oracle()));
    }
    if [2, 3, 4, 5, 6, 9].into_iter().any(want) {
        let runs = benchmark_runs();
        let table: [(u32, &str, fn(&[SeedRun]) -> Outcome); 6] = [
            (2, "vanilla analog", vanilla_analog),
            (3, "GA collapse analog", ga_collapse),
            (4, "differentiation ordering", differentiation),
            (5, "collateral-damage ordering", collateral),
            (6, "efficiency analog", efficiency),
            (9, "robustness analog", robustness),
        ];
        for (i, name, f) in table {
            if want(i) {
                results.push((i, name, f(&runs)));
            }
        }
    }
    results.sort_by_key(|r| r.0);

    println!();
    for (i, name, o) in &results {
        println!("criterion {i} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
