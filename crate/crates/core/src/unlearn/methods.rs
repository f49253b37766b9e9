use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    log_sum_exp, Adam, AdamConfig, AutodiffError, Graph, LossTarget, NodeId, Reduction, Segment,
};
use crate::data::EncodedExample;
use crate::model::{CausalLm, LanguageModel, ModelError, PackedBatch, Snapshot, TokenSequence};

use super::localize::{collect_signature, compute_localization, LocalizationMask};
use super::{stream_rng, streams, Method, UnlearnConfig, UnlearnError};

/// Outcome of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: Method,
    pub micro_steps: usize,
    pub optimizer_steps: usize,
    pub epochs_completed: usize,
    /// Mean per-token loss of the forget term, per epoch, toward whichever
    /// labels the method uses.
    pub forget_loss: Vec<f64>,
    /// Mean per-token retain loss (NLL or KL), per epoch.
    pub retain_loss: Vec<f64>,
    /// Set when a non-finite value stopped the run early.
    pub terminated: Option<String>,
    pub early_stopped: bool,
    /// Wall-clock seconds per optimizer step; empty unless timing is on.
    pub step_seconds: Vec<f64>,
    /// Largest graph footprint seen in any micro-step.
    pub peak_bytes: usize,
    pub mask: Option<LocalizationMask>,
    /// True when the localization came back empty and the top-magnitude
    /// module was used instead.
    pub mask_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ForgetMode {
    Ascent,
    RandomLabels,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RetainMode {
    None,
    Descent,
    Kl,
}

pub(crate) fn trainable_flags(
    model: &LanguageModel<f32>,
    mask: Option<&BTreeSet<String>>,
) -> Result<Vec<bool>, UnlearnError> {
    if let Some(m) = mask {
        if let Some(bad) = m.iter().find(|id| model.params().index_of(id).is_none()) {
            return Err(AutodiffError::UnknownModule(bad.clone()).into());
        }
    }
    Ok(model
        .params()
        .ids()
        .map(|id| mask.is_none_or(|m| m.contains(id)))
        .collect())
}

/// One target per answer token of every segment, labelled by `label(gold)`.
pub(crate) fn answer_targets(
    tokens: &[usize],
    segments: &[Segment],
    prompt_lens: impl IntoIterator<Item = usize>,
    mut label: impl FnMut(usize) -> usize,
) -> Vec<LossTarget<f32>> {
    let mut out = Vec::new();
    for (seg, p) in segments.iter().zip(prompt_lens) {
        for i in p.max(1)..seg.len {
            out.push(LossTarget {
                row: seg.start + i - 1,
                token: label(tokens[seg.start + i]),
                weight: 1.0,
            });
        }
    }
    out
}

/// Uniform token from `0..vocab` other than `gold`.
pub fn random_substitute(rng: &mut ChaCha8Rng, vocab: usize, gold: usize) -> usize {
    let r = rng.random_range(0..vocab - 1);
    if r >= gold {
        r + 1
    } else {
        r
    }
}

/// Highest-scoring token other than `gold`; ties go to the lowest index.
pub fn adversarial_from_logits(row: &[f64], gold: usize) -> Result<usize, UnlearnError> {
    if row.len() < 2 {
        return Err(UnlearnError::InvalidConfig(
            "adversarial labels need at least two tokens".into(),
        ));
    }
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i != gold && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    Ok(best.expect("vocab has a non-gold token"))
}

/// Most likely non-gold token at answer position `i`, teacher-forced on
/// the gold prefix.
pub fn adversarial_token<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    i: usize,
) -> Result<usize, UnlearnError> {
    if model.vocab_size() < 2 {
        return Err(UnlearnError::InvalidConfig(
            "adversarial labels need at least two tokens".into(),
        ));
    }
    if i < seq.prompt_len().max(1) || i >= seq.len() {
        return Err(ModelError::InvalidSequence(format!(
            "position {i} outside answer region {}..{}",
            seq.prompt_len(),
            seq.len()
        ))
        .into());
    }
    let logits = model.forward_logits(&seq.tokens()[..i])?;
    adversarial_from_logits(logits.last().expect("nonempty prefix"), seq.tokens()[i])
}

fn is_non_finite(e: &UnlearnError) -> bool {
    matches!(
        e,
        UnlearnError::Autodiff(AutodiffError::NonFinite { .. })
            | UnlearnError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
    )
}

/// Reference log-probabilities at the answer rows of each retain example.
struct ReferenceCache<'a> {
    model: &'a LanguageModel<f32>,
    rows: Vec<Option<Vec<f32>>>,
}

impl<'a> ReferenceCache<'a> {
    fn get(&mut self, idx: usize, seq: &TokenSequence) -> Result<&[f32], UnlearnError> {
        if self.rows[idx].is_none() {
            let logits = self.model.forward_logits(&seq.tokens()[..seq.len() - 1])?;
            let mut out = Vec::new();
            for row in &logits[seq.prompt_len().max(1) - 1..] {
                let lse = log_sum_exp(row);
                out.extend(row.iter().map(|&z| (z - lse) as f32));
            }
            self.rows[idx] = Some(out);
        }
        Ok(self.rows[idx].as_deref().expect("filled above"))
    }
}

struct Objective<'a> {
    method: Method,
    forget: ForgetMode,
    retain: RetainMode,
    reference: Option<&'a LanguageModel<f32>>,
}

fn check_inputs(
    forget: &[EncodedExample],
    retain: Option<&[EncodedExample]>,
    config: &UnlearnConfig,
) -> Result<(), UnlearnError> {
    config.validate()?;
    if forget.is_empty() {
        return Err(UnlearnError::EmptySplit("forget"));
    }
    if retain.is_some_and(|r| r.is_empty()) {
        return Err(UnlearnError::EmptySplit("retain"));
    }
    Ok(())
}

fn scale(reduction: Reduction, weight: f64, count: usize) -> f32 {
    match reduction {
        Reduction::Mean => (weight / count as f64) as f32,
        Reduction::Sum => weight as f32,
    }
}

fn run(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: Option<&[EncodedExample]>,
    config: &UnlearnConfig,
    objective: Objective<'_>,
    mask: Option<&BTreeSet<String>>,
) -> Result<UnlearnReport, UnlearnError> {
    check_inputs(forget, retain, config)?;
    let vocab = model.config().vocab_size;
    for e in forget.iter().chain(retain.unwrap_or_default()) {
        e.seq.check_vocab(vocab)?;
    }
    let retain_active = match objective.retain {
        RetainMode::None => false,
        RetainMode::Descent => config.retain_weight != 0.0,
        RetainMode::Kl => config.kl_weight != 0.0,
    };
    let retain = match (retain_active, retain) {
        (false, _) => &[][..],
        (true, Some(r)) => r,
        (true, None) => return Err(UnlearnError::EmptySplit("retain")),
    };
    let flags = trainable_flags(model, mask)?;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::with_lr(config.learning_rate)
    });
    let mut forget_rng = stream_rng(config.seed, streams::FORGET_ORDER);
    let mut retain_rng = stream_rng(config.seed, streams::RETAIN_ORDER);
    let mut label_rng = stream_rng(config.seed, streams::LABELS);
    let mut reference = objective.reference.map(|m| ReferenceCache {
        model: m,
        rows: vec![None; retain.len()],
    });

    let mut report = UnlearnReport {
        method: objective.method,
        micro_steps: 0,
        optimizer_steps: 0,
        epochs_completed: 0,
        forget_loss: Vec::new(),
        retain_loss: Vec::new(),
        terminated: None,
        early_stopped: false,
        step_seconds: Vec::new(),
        peak_bytes: 0,
        mask: None,
        mask_fallback: false,
    };
    let mut forget_order: Vec<usize> = (0..forget.len()).collect();
    let mut retain_order: Vec<usize> = (0..retain.len()).collect();
    let mut retain_pos = retain.len();
    let mut pending = 0usize;
    let mut window_start = None;

    'epochs: for _ in 0..config.epochs {
        forget_order.shuffle(&mut forget_rng);
        let (mut f_sum, mut f_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
        for chunk in forget_order.chunks(config.batch_size) {
            if config.timing && window_start.is_none() {
                window_start = Some(Instant::now());
            }
            let mut r_idx = Vec::new();
            if retain_active {
                for _ in 0..config.batch_size {
                    if retain_pos == retain.len() {
                        retain_order.shuffle(&mut retain_rng);
                        retain_pos = 0;
                    }
                    r_idx.push(retain_order[retain_pos]);
                    retain_pos += 1;
                }
            }
            let step = micro_step(
                model,
                forget,
                retain,
                chunk,
                &r_idx,
                config,
                &objective,
                &flags,
                &mut label_rng,
                reference.as_mut(),
            );
            let (f_loss, r_loss, peak) = match step {
                Ok(v) => v,
                Err(e) if is_non_finite(&e) => {
                    report.terminated = Some(e.to_string());
                    model.params_mut().zero_grad();
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            report.peak_bytes = report.peak_bytes.max(peak);
            if let Some(v) = f_loss {
                f_sum += v;
                f_n += 1;
            }
            if let Some(v) = r_loss {
                r_sum += v;
                r_n += 1;
            }
            report.micro_steps += 1;
            pending += 1;
            if pending == config.accum_steps {
                apply_step(model, &mut opt, pending, mask, &mut report, &mut window_start)?;
                pending = 0;
            }
        }
        if pending > 0 {
            apply_step(model, &mut opt, pending, mask, &mut report, &mut window_start)?;
            pending = 0;
        }
        report.forget_loss.push(if f_n > 0 { f_sum / f_n as f64 } else { 0.0 });
        report.retain_loss.push(if r_n > 0 { r_sum / r_n as f64 } else { 0.0 });
        report.epochs_completed += 1;
        if let Some(threshold) = config.early_stop {
            let seqs: Vec<_> = forget.iter().map(|e| e.seq.clone()).collect();
            if crate::eval::mismatch_rate(&*model, &seqs)? >= threshold {
                report.early_stopped = true;
                break;
            }
        }
    }
    Ok(report)
}

fn apply_step(
    model: &mut LanguageModel<f32>,
    opt: &mut Adam<f32>,
    pending: usize,
    mask: Option<&BTreeSet<String>>,
    report: &mut UnlearnReport,
    window_start: &mut Option<Instant>,
) -> Result<(), UnlearnError> {
    opt.step(model.params_mut(), 1.0 / pending as f32, mask)?;
    model.params_mut().zero_grad();
    report.optimizer_steps += 1;
    if let Some(t) = window_start.take() {
        report.step_seconds.push(t.elapsed().as_secs_f64());
    }
    Ok(())
}

type StepLosses = (Option<f64>, Option<f64>, usize);

#[allow(clippy::too_many_arguments)]
fn micro_step(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: &[EncodedExample],
    f_idx: &[usize],
    r_idx: &[usize],
    config: &UnlearnConfig,
    objective: &Objective<'_>,
    flags: &[bool],
    label_rng: &mut ChaCha8Rng,
    reference: Option<&mut ReferenceCache<'_>>,
) -> Result<StepLosses, UnlearnError> {
    let vocab = model.config().vocab_size;
    let seqs: Vec<&TokenSequence> = f_idx
        .iter()
        .map(|&i| &forget[i].seq)
        .chain(r_idx.iter().map(|&i| &retain[i].seq))
        .collect();
    let batch = PackedBatch::new(seqs.iter().map(|s| s.tokens()));
    let (f_segments, r_segments) = batch.segments.split_at(f_idx.len());

    let mut g = Graph::new();
    let logits = model.forward_packed(&mut g, &batch, |i| flags[i])?;
    let mut terms: Vec<NodeId> = Vec::with_capacity(2);
    let mut f_loss = None;
    let mut r_loss = None;

    if config.forget_weight != 0.0 {
        let prompt_lens = f_idx.iter().map(|&i| forget[i].seq.prompt_len());
        let mut targets = match objective.forget {
            ForgetMode::RandomLabels => {
                answer_targets(&batch.tokens, f_segments, prompt_lens, |gold| {
                    random_substitute(label_rng, vocab, gold)
                })
            }
            _ => answer_targets(&batch.tokens, f_segments, prompt_lens, |t| t),
        };
        if objective.forget == ForgetMode::Adversarial {
            let z = g.value(logits);
            for t in &mut targets {
                let row: Vec<f64> = z.row(t.row).iter().map(|&v| v as f64).collect();
                t.token = adversarial_from_logits(&row, t.token)?;
            }
        }
        let sign = if objective.forget == ForgetMode::Ascent { -1.0 } else { 1.0 };
        let w = scale(config.reduction, sign * config.forget_weight, targets.len());
        targets.iter_mut().for_each(|t| t.weight = w);
        let node = g.cross_entropy(logits, &targets)?;
        let total_w = w as f64 * targets.len() as f64;
        f_loss = Some(g.value(node).values()[0] as f64 / total_w);
        terms.push(node);
    }

    if !r_idx.is_empty() {
        let prompt_lens = r_idx.iter().map(|&i| retain[i].seq.prompt_len());
        let mut targets = answer_targets(&batch.tokens, r_segments, prompt_lens, |t| t);
        match objective.retain {
            RetainMode::Descent => {
                let w = scale(config.reduction, config.retain_weight, targets.len());
                targets.iter_mut().for_each(|t| t.weight = w);
                let node = g.cross_entropy(logits, &targets)?;
                r_loss = Some(g.value(node).values()[0] as f64 / (w as f64 * targets.len() as f64));
                terms.push(node);
            }
            RetainMode::Kl => {
                let cache = reference.expect("KL objective carries a reference");
                let mut ref_logp = Vec::with_capacity(targets.len() * vocab);
                for &i in r_idx {
                    ref_logp.extend_from_slice(cache.get(i, &retain[i].seq)?);
                }
                let rows: Vec<usize> = targets.iter().map(|t| t.row).collect();
                let w = scale(config.reduction, config.kl_weight, rows.len());
                let node = g.kl_to_reference(logits, &rows, &vec![w; rows.len()], &ref_logp)?;
                r_loss = Some(g.value(node).values()[0] as f64 / (w as f64 * rows.len() as f64));
                terms.push(node);
            }
            RetainMode::None => {}
        }
    }

    if let Some((&first, rest)) = terms.split_first() {
        let mut loss = first;
        for &t in rest {
            loss = g.add(loss, t)?;
        }
        let grads = g.backward(loss)?;
        model.params_mut().accumulate(&grads);
    }
    Ok((f_loss, r_loss, g.peak_bytes()))
}

fn expect_method(config: &UnlearnConfig, method: Method) -> Result<(), UnlearnError> {
    if config.method != method {
        return Err(UnlearnError::InvalidConfig(format!(
            "config is for {:?}, called {:?}",
            config.method, method
        )));
    }
    Ok(())
}

/// Gradient ascent on the forget split.
pub fn unlearn_ga(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::Ga)?;
    let objective = Objective {
        method: Method::Ga,
        forget: ForgetMode::Ascent,
        retain: RetainMode::None,
        reference: None,
    };
    run(model, forget, None, config, objective, None)
}

/// Descent toward freshly drawn non-gold answer tokens.
pub fn unlearn_random_labels(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::RandomLabels)?;
    let objective = Objective {
        method: Method::RandomLabels,
        forget: ForgetMode::RandomLabels,
        retain: RetainMode::None,
        reference: None,
    };
    run(model, forget, None, config, objective, None)
}

/// Descent toward the current most likely non-gold token at each position.
pub fn unlearn_adversarial(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::Adversarial)?;
    let objective = Objective {
        method: Method::Adversarial,
        forget: ForgetMode::Adversarial,
        retain: RetainMode::None,
        reference: None,
    };
    run(model, forget, None, config, objective, None)
}

/// Ascent on the forget split interleaved with descent on `retain`.
pub fn unlearn_ga_plus_gd(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::GaGd)?;
    let objective = Objective {
        method: Method::GaGd,
        forget: ForgetMode::Ascent,
        retain: RetainMode::Descent,
        reference: None,
    };
    run(model, forget, Some(retain), config, objective, None)
}

/// Ascent on the forget split plus KL(current || reference) on `retain`.
pub fn unlearn_ga_plus_kl(
    model: &mut LanguageModel<f32>,
    reference: &Snapshot,
    forget: &[EncodedExample],
    retain: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::GaKl)?;
    let objective = Objective {
        method: Method::GaKl,
        forget: ForgetMode::Ascent,
        retain: RetainMode::Kl,
        reference: Some(reference.model()),
    };
    run(model, forget, Some(retain), config, objective, None)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Localizes the forget knowledge from gradient signatures, then runs the
/// combined forget/retain objective on the selected modules only.
pub fn memflex_unlearn(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: &[EncodedExample],
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::MemFlex)?;
    check_inputs(forget, Some(retain), config)?;
    let mf = &config.memflex;
    let g_ul = collect_signature(
        model,
        forget,
        mf.n_rounds,
        derive_seed(config.seed, streams::SIGNATURE_FORGET),
    )?;
    let g_rt = collect_signature(
        model,
        retain,
        mf.n_rounds,
        derive_seed(config.seed, streams::SIGNATURE_RETAIN),
    )?;
    let mut mask = compute_localization(&g_ul, &g_rt, mf.mu, mf.sigma)?;
    let fallback = mask.selected.is_empty();
    if fallback {
        mask.select_top_magnitude();
    }
    let selected = mask.selected.clone();
    let mut report = memflex_with_mask(model, forget, retain, config, &selected)?;
    report.mask = Some(mask);
    report.mask_fallback = fallback;
    Ok(report)
}

/// The masked stage of [`memflex_unlearn`] with a caller-supplied module set.
pub fn memflex_with_mask(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: &[EncodedExample],
    config: &UnlearnConfig,
    mask: &BTreeSet<String>,
) -> Result<UnlearnReport, UnlearnError> {
    expect_method(config, Method::MemFlex)?;
    let objective = Objective {
        method: Method::MemFlex,
        forget: ForgetMode::Ascent,
        retain: if config.memflex.forget_only {
            RetainMode::None
        } else {
            RetainMode::Descent
        },
        reference: None,
    };
    run(model, forget, Some(retain), config, objective, Some(mask))
}

/// Dispatches on `config.method`. `retain` is required by the combined
/// objectives; GA+KL snapshots `model` as its reference.
pub fn unlearn(
    model: &mut LanguageModel<f32>,
    forget: &[EncodedExample],
    retain: Option<&[EncodedExample]>,
    config: &UnlearnConfig,
) -> Result<UnlearnReport, UnlearnError> {
    let need = || retain.ok_or(UnlearnError::EmptySplit("retain"));
    match config.method {
        Method::Ga => unlearn_ga(model, forget, config),
        Method::RandomLabels => unlearn_random_labels(model, forget, config),
        Method::Adversarial => unlearn_adversarial(model, forget, config),
        Method::GaGd => unlearn_ga_plus_gd(model, forget, need()?, config),
        Method::GaKl => {
            let reference = model.snapshot();
            unlearn_ga_plus_kl(model, &reference, forget, need()?, config)
        }
        Method::MemFlex => memflex_unlearn(model, forget, need()?, config),
    }
}
