use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet, Scalar};

/// Hyperparameters for [`Adam`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction and optional per-module masking.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First- and second-moment accumulators of parameter `idx`, if allocated.
    pub fn moments(&self, idx: usize) -> Option<(&[T], &[T])> {
        Some((self.first.get(idx)?.as_slice(), self.second.get(idx)?.as_slice()))
    }

    fn ensure_state(&mut self, params: &ParamSet<T>) -> Result<(), AutodiffError> {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
            self.second = self.first.clone();
            return Ok(());
        }
        let ok = self.first.len() == params.len()
            && params
                .iter()
                .zip(&self.first)
                .all(|((_, t), m)| t.numel() == m.len());
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::OptimizerStateMismatch)
        }
    }

    /// Applies one update from the gradients stored on `params`, scaled by
    /// `grad_scale` (e.g. `1/k` after accumulating `k` micro-batches).
    ///
    /// With `mask = Some(ids)`, only those modules move and only their
    /// moments are updated; everything else is left bit-identical. The step
    /// counter advances regardless. Parameters without a stored gradient are
    /// treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grad_scale: T,
        mask: Option<&BTreeSet<String>>,
    ) -> Result<(), AutodiffError> {
        if let Some(ids) = mask {
            if let Some(bad) = ids.iter().find(|id| params.index_of(id).is_none()) {
                return Err(AutodiffError::UnknownModule(bad.clone()));
            }
        }
        self.ensure_state(params)?;
        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.epsilon);
        let decay = T::from_f64(c.learning_rate * c.weight_decay);

        for idx in 0..params.len() {
            let (id, tensor) = params.by_index_mut(idx);
            if let Some(ids) = mask {
                if !ids.contains(id) {
                    continue;
                }
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            let grad = tensor.grad().map(<[T]>::to_vec);
            let values = tensor.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j] * grad_scale);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if c.weight_decay != 0.0 {
                    values[j] -= decay * values[j];
                }
                values[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
