use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, ParamSet, Scalar, Segment, Tensor};

use super::{CausalLm, ModelConfig, ModelError};

/// Several sequences packed row-wise into one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedBatch {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut b = Self::default();
        for s in seqs {
            b.segments.push(Segment {
                start: b.tokens.len(),
                len: s.len(),
            });
            b.tokens.extend_from_slice(s);
            b.positions.extend(0..s.len());
        }
        b
    }

    pub fn single(tokens: &[usize]) -> Self {
        Self::new([tokens])
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

const PER_LAYER: usize = 8;

/// Tiny pre-norm decoder-only transformer.
///
/// Each weight tensor is one named module; [`LanguageModel::module_ids`]
/// lists them in a fixed order that survives checkpoint round-trips.
#[derive(Debug, Clone)]
pub struct LanguageModel<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    positional: Vec<T>,
}

impl<T: Scalar> PartialEq for LanguageModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn sinusoidal<T: Scalar>(context: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); context * d];
    for pos in 0..context {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

impl<T: Scalar> LanguageModel<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParamSet::new();

        let normal = |shape: Vec<usize>, sd: f64, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let dist = Normal::new(0.0, sd).expect("positive std");
            let n = shape.iter().product();
            let vals = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
            Tensor::new(shape, vals).expect("shape")
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![T::one(); n]).expect("shape");

        params.insert("tok_embed", normal(vec![config.vocab_size, d], 1.0, &mut rng))?;
        for l in 0..config.n_layers {
            params.insert(format!("layers.{l}.ln1"), ones(d))?;
            for proj in ["q", "k", "v"] {
                params.insert(format!("layers.{l}.attn.{proj}"), normal(vec![d, d], std, &mut rng))?;
            }
            params.insert(format!("layers.{l}.attn.o"), normal(vec![d, d], resid_std, &mut rng))?;
            params.insert(format!("layers.{l}.ln2"), ones(d))?;
            params.insert(
                format!("layers.{l}.mlp.up"),
                normal(vec![d, config.mlp_hidden], std, &mut rng),
            )?;
            params.insert(
                format!("layers.{l}.mlp.down"),
                normal(vec![config.mlp_hidden, d], resid_std, &mut rng),
            )?;
        }
        params.insert("ln_f", ones(d))?;
        params.insert("head", normal(vec![d, config.vocab_size], std, &mut rng))?;
        debug_assert_eq!(params.len(), config.module_count());

        let positional = sinusoidal(config.context_length, d);
        Ok(Self {
            config,
            params,
            positional,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization of `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let template = Self::init(config.clone())?;
        if template.params.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} modules, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((want_id, want), (id, t)) in template.params.iter().zip(params.iter()) {
            if want_id != id || want.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "module {id:?} {:?} does not match expected {want_id:?} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self {
            positional: template.positional,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.params.ids().map(String::from).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            params: self.params.cast(),
            positional: sinusoidal(self.config.context_length, self.config.embed_dim),
        }
    }

    /// Records the forward pass for `batch` on `g` and returns the logits
    /// node (`[rows, vocab]`). Row `t` of each segment scores token `t + 1`.
    pub fn forward_packed(
        &self,
        g: &mut Graph<T>,
        batch: &PackedBatch,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<NodeId, ModelError> {
        let c = &self.config;
        for s in &batch.segments {
            if s.len > c.context_length {
                return Err(ModelError::SequenceTooLong {
                    len: s.len,
                    max: c.context_length,
                });
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab_size: c.vocab_size,
            });
        }
        if batch.tokens.is_empty() {
            return Err(ModelError::InvalidSequence("empty batch".into()));
        }
        let d = c.embed_dim;
        let p = g.params(&self.params, trainable)?;
        let mut pe = Vec::with_capacity(batch.rows() * d);
        for &pos in &batch.positions {
            pe.extend_from_slice(&self.positional[pos * d..(pos + 1) * d]);
        }
        let tok = g.embedding(p[0], &batch.tokens)?;
        let pe = g.input(Tensor::new(vec![batch.rows(), d], pe)?)?;
        let mut x = g.add(tok, pe)?;
        for l in 0..c.n_layers {
            let m = &p[1 + l * PER_LAYER..1 + (l + 1) * PER_LAYER];
            let h = g.layer_norm(x, m[0])?;
            let q = g.matmul(h, m[1])?;
            let k = g.matmul(h, m[2])?;
            let v = g.matmul(h, m[3])?;
            let a = g.causal_attention(q, k, v, c.n_heads, &batch.segments)?;
            let o = g.matmul(a, m[4])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, m[5])?;
            let u = g.matmul(h, m[6])?;
            let u = g.gelu(u)?;
            let dn = g.matmul(u, m[7])?;
            x = g.add(x, dn)?;
        }
        let n = p.len();
        let h = g.layer_norm(x, p[n - 2])?;
        Ok(g.matmul(h, p[n - 1])?)
    }
}

impl LanguageModel<f32> {
    /// Frozen copy for later restoration (e.g. a KL reference).
    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.clone())
    }
}

/// Immutable copy of a model at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(LanguageModel<f32>);

impl Snapshot {
    pub fn restore(&self) -> LanguageModel<f32> {
        self.0.clone()
    }

    pub fn model(&self) -> &LanguageModel<f32> {
        &self.0
    }
}

impl<T: Scalar> CausalLm for LanguageModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        if tokens.len() > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        let mut g = Graph::new();
        let z = self.forward_packed(&mut g, &PackedBatch::single(tokens), |_| false)?;
        let t = g.value(z);
        Ok((0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}
