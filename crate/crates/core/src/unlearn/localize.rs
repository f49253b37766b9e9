use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::data::EncodedExample;
use crate::model::{LanguageModel, PackedBatch};

use super::methods::{answer_targets, random_substitute};
use super::{stream_rng, UnlearnError};

const SIGNATURE_CHUNK: usize = 32;

/// Per-module gradient averaged over random-label rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSignature {
    pub grads: ParamSet<f64>,
    pub n_rounds: usize,
}

/// Gradient of the mean (over examples) of the per-example mean NLL, with
/// every answer label replaced by a uniform non-gold token drawn from `rng`.
/// Returns one dense buffer per module.
pub fn signature_round(
    model: &LanguageModel<f32>,
    examples: &[EncodedExample],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, UnlearnError> {
    if examples.is_empty() {
        return Err(UnlearnError::EmptySplit("signature"));
    }
    let vocab = model.config().vocab_size;
    let n = examples.len() as f64;
    let mut acc: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    for chunk in examples.chunks(SIGNATURE_CHUNK) {
        let batch = PackedBatch::new(chunk.iter().map(|e| e.seq.tokens()));
        let mut targets = Vec::new();
        for (e, seg) in chunk.iter().zip(&batch.segments) {
            let mut t = answer_targets(
                &batch.tokens,
                std::slice::from_ref(seg),
                [e.seq.prompt_len()],
                |gold| random_substitute(rng, vocab, gold),
            );
            let w = (1.0 / (n * t.len() as f64)) as f32;
            t.iter_mut().for_each(|x| x.weight = w);
            targets.extend(t);
        }
        let mut g = Graph::new();
        let logits = model.forward_packed(&mut g, &batch, |_| true)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let grads = g.backward(loss)?;
        for (idx, grad) in grads.iter() {
            for (a, &v) in acc[idx].iter_mut().zip(grad) {
                *a += v as f64;
            }
        }
    }
    Ok(acc)
}

/// Averages `n_rounds` independent [`signature_round`]s; round `r` draws
/// its labels from stream `r` of `seed`. The model is not modified.
pub fn collect_signature(
    model: &LanguageModel<f32>,
    examples: &[EncodedExample],
    n_rounds: usize,
    seed: u64,
) -> Result<GradientSignature, UnlearnError> {
    if n_rounds == 0 {
        return Err(UnlearnError::InvalidConfig("n_rounds must be at least 1".into()));
    }
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for r in 0..n_rounds {
        let round = signature_round(model, examples, &mut stream_rng(seed, r as u64))?;
        match sum.as_mut() {
            None => sum = Some(round),
            Some(s) => {
                for (a, b) in s.iter_mut().zip(round) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = ParamSet::new();
    for ((id, t), vals) in model.params().iter().zip(sum.expect("n_rounds >= 1")) {
        let avg = vals.into_iter().map(|v| v / n_rounds as f64).collect();
        grads.insert(id, Tensor::new(t.shape().to_vec(), avg)?)?;
    }
    Ok(GradientSignature { grads, n_rounds })
}

fn aligned<'a>(
    a: &'a GradientSignature,
    b: &'a GradientSignature,
) -> Result<Vec<(&'a str, &'a [f64], &'a [f64])>, UnlearnError> {
    if a.grads.len() != b.grads.len() {
        return Err(UnlearnError::SignatureMismatch(format!(
            "{} vs {} modules",
            a.grads.len(),
            b.grads.len()
        )));
    }
    a.grads
        .iter()
        .zip(b.grads.iter())
        .map(|((ia, ta), (ib, tb))| {
            if ia != ib || ta.shape() != tb.shape() {
                Err(UnlearnError::SignatureMismatch(format!(
                    "module {ia:?} {:?} vs {ib:?} {:?}",
                    ta.shape(),
                    tb.shape()
                )))
            } else {
                Ok((ia, ta.values(), tb.values()))
            }
        })
        .collect()
}

/// Flattened cosine similarity per module; 0 when either side is all zeros.
pub fn cosine_per_module(
    g_ul: &GradientSignature,
    g_rt: &GradientSignature,
) -> Result<IndexMap<String, f64>, UnlearnError> {
    Ok(aligned(g_ul, g_rt)?
        .into_iter()
        .map(|(id, a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            };
            (id.to_string(), cos)
        })
        .collect())
}

/// Mean absolute entry per module.
pub fn magnitude_per_module(g: &GradientSignature) -> IndexMap<String, f64> {
    g.grads
        .iter()
        .map(|(id, t)| {
            let v = t.values();
            (id.to_string(), v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// How a selection threshold is derived from the per-module values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Median,
    Mean,
    /// Linear-interpolated quantile in `[0, 1]`.
    Quantile(f64),
    Fixed(f64),
}

impl ThresholdPolicy {
    pub fn resolve(self, values: &[f64]) -> f64 {
        let sorted = || {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let quantile = |q: f64| {
            let v = sorted();
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        match self {
            ThresholdPolicy::Median => quantile(0.5),
            ThresholdPolicy::Mean => values.iter().sum::<f64>() / values.len() as f64,
            ThresholdPolicy::Quantile(q) => quantile(q),
            ThresholdPolicy::Fixed(x) => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDiagnostic {
    pub module: String,
    pub cosine: f64,
    pub magnitude: f64,
    pub selected: bool,
}

/// Modules chosen for unlearning and the thresholds behind the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMask {
    pub selected: BTreeSet<String>,
    pub mu: f64,
    pub sigma: f64,
    /// One entry per model module, in model order.
    pub diagnostics: Vec<ModuleDiagnostic>,
    /// The threshold rule selected nothing.
    pub empty: bool,
    /// `selected` was replaced by the single largest-magnitude module.
    pub fallback: bool,
}

impl LocalizationMask {
    /// The set the threshold rule yields from the stored diagnostics.
    pub fn rule_selection(&self) -> BTreeSet<String> {
        self.diagnostics
            .iter()
            .filter(|d| d.cosine < self.mu && d.magnitude > self.sigma)
            .map(|d| d.module.clone())
            .collect()
    }

    /// Replaces the selection with the largest-magnitude module (first one
    /// on ties).
    pub fn select_top_magnitude(&mut self) {
        let mut best: Option<&ModuleDiagnostic> = None;
        for d in &self.diagnostics {
            if best.is_none_or(|b| d.magnitude > b.magnitude) {
                best = Some(d);
            }
        }
        if let Some(b) = best {
            let id = b.module.clone();
            for d in &mut self.diagnostics {
                d.selected = d.module == id;
            }
            self.selected = BTreeSet::from([id]);
            self.fallback = true;
        }
    }
}

/// Selects every module whose forget/retain cosine is below `mu` and whose
/// forget magnitude is above `sigma`.
pub fn compute_localization(
    g_ul: &GradientSignature,
    g_rt: &GradientSignature,
    mu_policy: ThresholdPolicy,
    sigma_policy: ThresholdPolicy,
) -> Result<LocalizationMask, UnlearnError> {
    let cos = cosine_per_module(g_ul, g_rt)?;
    let mag = magnitude_per_module(g_ul);
    let mu = mu_policy.resolve(&cos.values().copied().collect::<Vec<_>>());
    let sigma = sigma_policy.resolve(&mag.values().copied().collect::<Vec<_>>());
    let diagnostics: Vec<ModuleDiagnostic> = cos
        .iter()
        .map(|(id, &c)| {
            let m = mag[id];
            ModuleDiagnostic {
                module: id.clone(),
                cosine: c,
                magnitude: m,
                selected: c < mu && m > sigma,
            }
        })
        .collect();
    let selected: BTreeSet<String> = diagnostics
        .iter()
        .filter(|d| d.selected)
        .map(|d| d.module.clone())
        .collect();
    Ok(LocalizationMask {
        empty: selected.is_empty(),
        selected,
        mu,
        sigma,
        diagnostics,
        fallback: false,
    })
}
