use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::data::EncodedExample;
use crate::model::{LanguageModel, PackedBatch};

use super::methods::{answer_targets, trainable_flags};
use super::{stream_rng, streams, UnlearnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Sequences packed into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Probability that an example is shown with the robustness prefix in
    /// a given epoch.
    pub prefix_prob: f64,
    pub weight_decay: f64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Restrict training to these modules; all others stay frozen.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainable_modules: Option<BTreeSet<String>>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 16,
            seed: 0,
            prefix_prob: 0.25,
            weight_decay: 0.0,
            cosine_decay: true,
            trainable_modules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Answer-only next-token training on `examples`.
///
/// Fails with [`UnlearnError::Diverged`] when an epoch's mean loss exceeds
/// ten times the larger of the first batch loss and the uniform-prediction
/// loss `ln V`.
pub fn pretrain(
    model: &mut LanguageModel<f32>,
    examples: &[EncodedExample],
    config: &PretrainConfig,
    prefix: &[usize],
) -> Result<PretrainReport, UnlearnError> {
    if config.batch_size == 0 {
        return Err(UnlearnError::InvalidConfig("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.prefix_prob) {
        return Err(UnlearnError::InvalidConfig("prefix_prob must lie in [0, 1]".into()));
    }
    let mut report = PretrainReport {
        epochs: 0,
        steps: 0,
        initial_loss: None,
        final_loss: None,
        epoch_losses: Vec::new(),
    };
    if config.epochs == 0 || examples.is_empty() {
        return Ok(report);
    }
    let max = model.config().context_length;
    for e in examples {
        e.seq.check_vocab(model.config().vocab_size)?;
        if e.seq.len() + prefix.len() > max {
            return Err(crate::model::ModelError::SequenceTooLong {
                len: e.seq.len() + prefix.len(),
                max,
            }
            .into());
        }
    }
    let mask = config.trainable_modules.as_ref();
    let flags = trainable_flags(model, mask)?;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::with_lr(config.learning_rate)
    });
    let mut order_rng = stream_rng(config.seed, streams::PRETRAIN_ORDER);
    let mut prefix_rng = stream_rng(config.seed, streams::PRETRAIN_PREFIX);
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = &examples[i].seq;
                    if !prefix.is_empty() && prefix_rng.random::<f64>() < config.prefix_prob {
                        s.with_prefix(prefix)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let batch = PackedBatch::new(seqs.iter().map(|s| s.tokens()));
            let mut targets = answer_targets(
                &batch.tokens,
                &batch.segments,
                seqs.iter().map(|s| s.prompt_len()),
                |t| t,
            );
            let w = 1.0 / targets.len() as f32;
            targets.iter_mut().for_each(|t| t.weight = w);

            let mut g = Graph::new();
            let logits = model.forward_packed(&mut g, &batch, |i| flags[i])?;
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.value(loss).values()[0] as f64;
            let grads = g.backward(loss)?;
            model.params_mut().zero_grad();
            model.params_mut().accumulate(&grads);
            if config.cosine_decay {
                let progress = report.steps as f64 / total_steps as f64;
                opt.config.learning_rate =
                    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            opt.step(model.params_mut(), 1.0, mask)?;
            report.initial_loss.get_or_insert(value);
            report.steps += 1;
            epoch_loss += value;
        }
        model.params_mut().zero_grad();
        let mean = epoch_loss / steps_per_epoch as f64;
        report.epoch_losses.push(mean);
        report.epochs = epoch + 1;
        report.final_loss = Some(mean);
        let floor = (model.config().vocab_size as f64).ln();
        let limit = report.initial_loss.map_or(f64::INFINITY, |l| l.max(floor)) * 10.0;
        if !mean.is_finite() || mean > limit {
            return Err(UnlearnError::Diverged {
                epoch,
                loss: mean,
                limit,
            });
        }
    }
    Ok(report)
}
