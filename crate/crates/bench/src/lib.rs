//! Shared fixtures for the step-time benchmarks.

use unlearn_core::data::{generate_benchmark, BenchmarkParams, EncodedExample, Split};
use unlearn_core::model::{LanguageModel, ModelConfig, PackedBatch};
use unlearn_core::unlearn::{Method, RetainSource, UnlearnConfig};

pub struct Fixture {
    pub model: LanguageModel<f32>,
    pub forget: Vec<EncodedExample>,
    pub retain: Vec<EncodedExample>,
}

impl Fixture {
    /// Untrained model of the given width on a small generated benchmark.
    pub fn new(embed_dim: usize, n_instances: usize) -> Self {
        let ds = generate_benchmark(&BenchmarkParams {
            n_instances,
            ..Default::default()
        })
        .expect("default pools suffice");
        let model = LanguageModel::init(ModelConfig {
            vocab_size: ds.vocab.len(),
            embed_dim,
            mlp_hidden: 4 * embed_dim,
            ..Default::default()
        })
        .expect("valid config");
        Self {
            model,
            forget: ds.encode(Split::Unlearn).expect("encodes"),
            retain: ds.encode(Split::Retention).expect("encodes"),
        }
    }

    /// The first `n` forget examples packed into one batch.
    pub fn batch(&self, n: usize) -> PackedBatch {
        PackedBatch::new(self.forget.iter().take(n).map(|e| e.seq.tokens()))
    }
}

/// One epoch with default settings, per-step timing on.
pub fn timed_config(method: Method) -> UnlearnConfig {
    let mut c = UnlearnConfig::new(method).with_seed(0);
    c.epochs = 1;
    c.timing = true;
    if matches!(method, Method::GaGd | Method::GaKl | Method::MemFlex) {
        c = c.with_retain(RetainSource::Id);
    }
    c
}
