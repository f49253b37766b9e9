//! Knowledge planting, the first-order unlearning baselines, and
//! gradient-localized unlearning.

mod localize;
mod methods;
mod pretrain;

pub use localize::{
    collect_signature, compute_localization, cosine_per_module, magnitude_per_module,
    signature_round, GradientSignature, LocalizationMask, ModuleDiagnostic, ThresholdPolicy,
};
pub use methods::{
    adversarial_from_logits, adversarial_token, memflex_unlearn, memflex_with_mask,
    random_substitute, unlearn, unlearn_adversarial, unlearn_ga, unlearn_ga_plus_gd,
    unlearn_ga_plus_kl, unlearn_random_labels, UnlearnReport,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Reduction};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid unlearning config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds {limit}")]
    Diverged { epoch: usize, loss: f64, limit: f64 },
    #[error("signatures disagree: {0}")]
    SignatureMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ga,
    RandomLabels,
    Adversarial,
    GaGd,
    GaKl,
    #[serde(rename = "memflex")]
    MemFlex,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ga => "GA",
            Method::RandomLabels => "RandomLabels",
            Method::Adversarial => "Adversarial",
            Method::GaGd => "GA+GD",
            Method::GaKl => "GA+KL",
            Method::MemFlex => "MemFlex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainSource {
    Id,
    Ood,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemFlexConfig {
    /// Random-label rounds averaged into each gradient signature.
    pub n_rounds: usize,
    pub mu: ThresholdPolicy,
    pub sigma: ThresholdPolicy,
    /// Ablation: ascend on the forget split only, without the retain term.
    pub forget_only: bool,
}

impl Default for MemFlexConfig {
    fn default() -> Self {
        Self {
            n_rounds: 5,
            mu: ThresholdPolicy::Median,
            sigma: ThresholdPolicy::Median,
            forget_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    #[serde(default = "default_retain")]
    pub retain_source: RetainSource,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub accum_steps: usize,
    #[serde(default = "one_f64")]
    pub forget_weight: f64,
    #[serde(default = "one_f64")]
    pub retain_weight: f64,
    #[serde(default = "one_f64")]
    pub kl_weight: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub memflex: MemFlexConfig,
    /// Stop after an epoch once this fraction of the forget split no
    /// longer decodes to its answer.
    #[serde(default)]
    pub early_stop: Option<f64>,
    /// Record wall-clock time per optimizer step.
    #[serde(default)]
    pub timing: bool,
}

fn default_retain() -> RetainSource {
    RetainSource::None
}
fn default_epochs() -> usize {
    2
}
fn one_usize() -> usize {
    1
}
fn default_accum() -> usize {
    16
}
fn one_f64() -> f64 {
    1.0
}

/// Baseline learning rate for the small default model: ten times the
/// 5e-5 used for 7B models.
pub const BASELINE_LR: f64 = 5e-4;
/// MemFlex learning rate, kept at six times [`BASELINE_LR`].
pub const MEMFLEX_LR: f64 = 3e-3;

impl UnlearnConfig {
    /// Defaults for `method`: two epochs, batch 1, accumulation 16, and the
    /// method's default learning rate and retain source.
    pub fn new(method: Method) -> Self {
        let (learning_rate, retain_source) = match method {
            Method::GaGd | Method::GaKl => (BASELINE_LR, RetainSource::Id),
            Method::MemFlex => (MEMFLEX_LR, RetainSource::Id),
            _ => (BASELINE_LR, RetainSource::None),
        };
        Self {
            method,
            retain_source,
            epochs: default_epochs(),
            learning_rate,
            batch_size: 1,
            accum_steps: default_accum(),
            forget_weight: 1.0,
            retain_weight: 1.0,
            kl_weight: 1.0,
            weight_decay: 0.0,
            reduction: Reduction::Mean,
            seed: 0,
            memflex: MemFlexConfig::default(),
            early_stop: None,
            timing: false,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_retain(mut self, source: RetainSource) -> Self {
        self.retain_source = source;
        self
    }

    /// Whether the method consumes a retain split.
    pub fn uses_retain(&self) -> bool {
        match self.method {
            Method::GaGd | Method::GaKl => true,
            Method::MemFlex => !self.memflex.forget_only,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<(), UnlearnError> {
        let bad = |m: &str| Err(UnlearnError::InvalidConfig(m.into()));
        if matches!(self.method, Method::GaGd | Method::GaKl | Method::MemFlex)
            && self.uses_retain()
            && self.retain_source == RetainSource::None
        {
            return bad("this method requires a retain source");
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return bad("batch_size and accum_steps must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        let weights = [self.forget_weight, self.retain_weight, self.kl_weight, self.weight_decay];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("weights must be finite and non-negative");
        }
        if self.method == Method::MemFlex && self.memflex.n_rounds == 0 {
            return bad("memflex.n_rounds must be at least 1");
        }
        Ok(())
    }
}

/// Seeded generator for one independent random stream.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const FORGET_ORDER: u64 = 10;
    pub const RETAIN_ORDER: u64 = 11;
    pub const LABELS: u64 = 12;
    pub const SIGNATURE_FORGET: u64 = 13;
    pub const SIGNATURE_RETAIN: u64 = 14;
    pub const PRETRAIN_ORDER: u64 = 15;
    pub const PRETRAIN_PREFIX: u64 = 16;
}

#[cfg(test)]
mod tests;
