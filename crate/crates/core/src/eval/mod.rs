//! Exact-match success rates, base-2 perplexity, collateral-damage and
//! robustness probes, and report/table emission.

mod report;
mod table;

pub use report::{EvalSplits, MetricsReport, SplitRobustness, REPORT_SCHEMA_VERSION};
pub use table::{comparison_csv, comparison_table, TableRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::log_sum_exp;
use crate::data::{EncodedExample, Vocab};
use crate::model::{argmax, greedy_decode, CausalLm, ModelError, TokenSequence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("efficiency probe needs at least one timed step")]
    NoSteps,
}

/// Perplexities above this are reported as overflowed.
pub const PPL_OVERFLOW: f64 = 1e10;

/// Base-2 perplexity, kept as its exponent so that astronomically large
/// values stay comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    /// Mean negative log2 probability per answer token.
    pub mean_bits: f64,
    pub tokens: usize,
    /// `2^mean_bits`, or `None` when it exceeds [`PPL_OVERFLOW`].
    pub value: Option<f64>,
}

impl Perplexity {
    pub fn from_bits(total_bits: f64, tokens: usize) -> Self {
        let mean_bits = total_bits / tokens as f64;
        let value = (mean_bits <= PPL_OVERFLOW.log2()).then(|| mean_bits.exp2());
        Self {
            mean_bits,
            tokens,
            value,
        }
    }

    pub fn overflowed(&self) -> bool {
        self.value.is_none()
    }

    pub fn render(&self) -> String {
        match self.value {
            Some(v) => format!("{v:.2}"),
            None => ">10^10".into(),
        }
    }
}

/// Teacher-forced scoring of one example's answer region.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScore {
    /// Greedy argmax per answer position, given the gold prefix.
    pub argmax: Vec<usize>,
    /// log2 probability of each gold answer token.
    pub log2_probs: Vec<f64>,
}

impl AnswerScore {
    /// Greedy decoding reproduces the gold answer exactly iff the argmax
    /// matches at every position under the gold prefix: until the first
    /// miss, the decoded prefix *is* the gold prefix.
    pub fn matched(&self, gold: &[usize]) -> bool {
        self.argmax == gold
    }

    pub fn token_hits(&self, gold: &[usize]) -> usize {
        self.argmax.iter().zip(gold).filter(|(a, b)| a == b).count()
    }
}

pub fn score_answer<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<AnswerScore, ModelError> {
    if seq.prompt_len() == 0 || seq.prompt_len() >= seq.len() {
        return Err(ModelError::InvalidSequence(
            "need a nonempty prompt and answer".into(),
        ));
    }
    seq.check_vocab(model.vocab_size())?;
    let logits = model.forward_logits(&seq.tokens()[..seq.len() - 1])?;
    let mut out = AnswerScore {
        argmax: Vec::with_capacity(seq.answer().len()),
        log2_probs: Vec::with_capacity(seq.answer().len()),
    };
    for i in seq.prompt_len()..seq.len() {
        let row = &logits[i - 1];
        out.argmax.push(argmax(row));
        out.log2_probs
            .push((row[seq.tokens()[i]] - log_sum_exp(row)) / std::f64::consts::LN_2);
    }
    Ok(out)
}

/// Whether greedy decoding from the prompt reproduces the answer exactly.
pub fn answer_matches<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<bool, ModelError> {
    Ok(score_answer(model, seq)?.matched(seq.answer()))
}

/// Greedy continuation of the prompt, at most as long as the gold answer
/// and stopping after the gold answer's final token.
pub fn decode_answer<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<Vec<usize>, ModelError> {
    greedy_decode(model, seq.prompt(), seq.answer().len(), seq.answer().last().copied())
}

/// Fraction of sequences whose answer is not reproduced.
pub fn mismatch_rate<M: CausalLm + ?Sized>(
    model: &M,
    seqs: &[TokenSequence],
) -> Result<f64, ModelError> {
    let mut misses = 0usize;
    for s in seqs {
        if !answer_matches(model, s)? {
            misses += 1;
        }
    }
    Ok(misses as f64 / seqs.len() as f64)
}

fn seqs(examples: &[EncodedExample]) -> Vec<TokenSequence> {
    examples.iter().map(|e| e.seq.clone()).collect()
}

/// Fraction of forget examples the model no longer reproduces.
pub fn unlearn_success<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
) -> Result<f64, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit("unlearn"));
    }
    Ok(mismatch_rate(model, &seqs(examples))?)
}

/// Fraction of examples the model still reproduces; exactly one minus
/// the mismatch rate on the same split.
pub fn retention_success<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
) -> Result<f64, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit("retention"));
    }
    Ok(1.0 - mismatch_rate(model, &seqs(examples))?)
}

/// Token-pooled base-2 perplexity of the gold answers.
pub fn perplexity<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
) -> Result<Perplexity, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit("perplexity"));
    }
    let (mut bits, mut tokens) = (0.0, 0usize);
    for e in examples {
        let s = score_answer(model, &e.seq)?;
        bits -= s.log2_probs.iter().sum::<f64>();
        tokens += s.log2_probs.len();
    }
    Ok(Perplexity::from_bits(bits, tokens))
}

/// Exact-match accuracy on the held-out general corpus.
pub fn general_proxy_eval<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
) -> Result<f64, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit("general"));
    }
    Ok(1.0 - mismatch_rate(model, &seqs(examples))?)
}

/// Per-example evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub decoded: String,
    pub matched: bool,
    pub log2_prob: f64,
    pub token_hits: usize,
    pub answer_tokens: usize,
}

/// Aggregates over one split plus the records they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub examples: usize,
    pub mismatches: usize,
    pub mismatch_rate: f64,
    pub match_rate: f64,
    pub token_accuracy: f64,
    pub perplexity: Perplexity,
    pub records: Vec<ExampleRecord>,
}

impl SplitEval {
    /// Recomputes every aggregate from `records`.
    pub fn from_records(records: Vec<ExampleRecord>) -> Self {
        let n = records.len();
        let mismatches = records.iter().filter(|r| !r.matched).count();
        let mismatch_rate = mismatches as f64 / n as f64;
        let hits: usize = records.iter().map(|r| r.token_hits).sum();
        let tokens: usize = records.iter().map(|r| r.answer_tokens).sum();
        let bits: f64 = records.iter().map(|r| -r.log2_prob).sum();
        Self {
            examples: n,
            mismatches,
            mismatch_rate,
            match_rate: 1.0 - mismatch_rate,
            token_accuracy: hits as f64 / tokens as f64,
            perplexity: Perplexity::from_bits(bits, tokens),
            records,
        }
    }
}

/// Scores every example of a split. Decoded text uses `vocab` when given.
pub fn evaluate_split<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
    vocab: Option<&Vocab>,
    name: &'static str,
) -> Result<SplitEval, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit(name));
    }
    let mut records = Vec::with_capacity(examples.len());
    for e in examples {
        let gold = e.seq.answer();
        let s = score_answer(model, &e.seq)?;
        let matched = s.matched(gold);
        let decoded = if matched {
            gold.to_vec()
        } else {
            decode_answer(model, &e.seq)?
        };
        records.push(ExampleRecord {
            id: e.id.clone(),
            decoded: match vocab {
                Some(v) => v.decode(&decoded),
                None => decoded.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            },
            matched,
            log2_prob: s.log2_probs.iter().sum(),
            token_hits: s.token_hits(gold),
            answer_tokens: gold.len(),
        });
    }
    Ok(SplitEval::from_records(records))
}

/// Step timing and memory footprint of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyProbe {
    pub seconds_per_step: f64,
    pub steps_measured: usize,
    pub peak_bytes: usize,
}

/// Mean seconds per step, skipping the first (warm-up) step when more
/// than one was timed.
pub fn efficiency_probe(step_seconds: &[f64], peak_bytes: usize) -> Result<EfficiencyProbe, EvalError> {
    let steps = match step_seconds {
        [] => return Err(EvalError::NoSteps),
        [only] => std::slice::from_ref(only),
        [_, rest @ ..] => rest,
    };
    Ok(EfficiencyProbe {
        seconds_per_step: steps.iter().sum::<f64>() / steps.len() as f64,
        steps_measured: steps.len(),
        peak_bytes,
    })
}

/// Match rates with and without a prompt prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub base_match_rate: f64,
    pub prefixed_match_rate: f64,
    /// `prefixed_match_rate - base_match_rate`.
    pub delta: f64,
    /// Examples that no longer fit the context once prefixed; excluded
    /// from both rates.
    pub rejected: usize,
    pub evaluated: usize,
}

pub fn robustness_eval<M: CausalLm + ?Sized>(
    model: &M,
    examples: &[EncodedExample],
    prefix: &[usize],
) -> Result<RobustnessResult, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit("robustness"));
    }
    let (mut base, mut prefixed, mut rejected, mut n) = (0usize, 0usize, 0usize, 0usize);
    for e in examples {
        if e.seq.len() + prefix.len() > model.context_length() {
            rejected += 1;
            continue;
        }
        n += 1;
        base += answer_matches(model, &e.seq)? as usize;
        prefixed += answer_matches(model, &e.seq.with_prefix(prefix))? as usize;
    }
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(RobustnessResult {
        base_match_rate: rate(base),
        prefixed_match_rate: rate(prefixed),
        delta: rate(prefixed) - rate(base),
        rejected,
        evaluated: n,
    })
}

#[cfg(test)]
mod tests;
