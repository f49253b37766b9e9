//! Tiny decoder-only language model with named parameter modules.

mod checkpoint;
mod config;
mod lm;
mod sequence;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use lm::{LanguageModel, PackedBatch, Snapshot};
pub use sequence::TokenSequence;

use thiserror::Error;

use crate::autodiff::{log_sum_exp, AutodiffError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that assigns next-token scores to a token prefix.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    /// Row `t` holds the pre-softmax scores for the token after position `t`.
    fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, ModelError>;
}

/// Natural-log probability of each answer token given everything before it.
pub fn answer_log_probs<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<Vec<f64>, ModelError> {
    if seq.prompt_len() == 0 {
        return Err(ModelError::InvalidSequence("prompt is empty".into()));
    }
    if seq.prompt_len() >= seq.len() {
        return Err(ModelError::InvalidSequence("answer region is empty".into()));
    }
    seq.check_vocab(model.vocab_size())?;
    let logits = model.forward_logits(&seq.tokens()[..seq.len() - 1])?;
    Ok((seq.prompt_len()..seq.len())
        .map(|i| {
            let row = &logits[i - 1];
            row[seq.tokens()[i]] - log_sum_exp(row)
        })
        .collect())
}

/// Sum of [`answer_log_probs`].
pub fn sequence_log_prob<M: CausalLm + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<f64, ModelError> {
    Ok(answer_log_probs(model, seq)?.iter().sum())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Stops after `max_new` tokens, after
/// emitting `stop` (which is included), or at the context limit.
pub fn greedy_decode<M: CausalLm + ?Sized>(
    model: &M,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::InvalidSequence("prompt is empty".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < model.context_length() {
        let logits = model.forward_logits(&tokens)?;
        let next = argmax(logits.last().expect("nonempty prompt"));
        tokens.push(next);
        out.push(next);
        if Some(next) == stop {
            break;
        }
    }
    Ok(out)
}
