use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and seed of the decoder-only language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// Standard deviation of the projection-matrix initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            context_length: 64,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 256,
            seed: 0,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(ModelError::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Number of named parameter modules: embedding, eight per layer
    /// (two norms, four attention projections, two MLP matrices), final
    /// norm and output head.
    pub fn module_count(&self) -> usize {
        1 + 8 * self.n_layers + 2
    }
}
