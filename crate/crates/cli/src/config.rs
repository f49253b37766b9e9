use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use unlearn_core::data::BenchmarkParams;
use unlearn_core::model::ModelConfig;
use unlearn_core::unlearn::{Method, PretrainConfig, UnlearnConfig};

use crate::CliError;

/// Architecture of the model; the vocabulary size comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context_length: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub init_std: f64,
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            context_length: m.context_length,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_hidden: m.mlp_hidden,
            init_std: m.init_std,
            seed: None,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_length: self.context_length,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            seed: self.seed.unwrap_or_default(),
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_instances: usize,
    pub questions_per_attribute: usize,
    pub n_ood_entities: usize,
    pub n_general_entities: usize,
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = BenchmarkParams::default();
        Self {
            n_instances: p.n_instances,
            questions_per_attribute: p.questions_per_attribute,
            n_ood_entities: p.n_ood_entities,
            n_general_entities: p.n_general_entities,
            seed: None,
        }
    }
}

impl DataSection {
    pub fn to_params(&self) -> BenchmarkParams {
        BenchmarkParams {
            seed: self.seed.unwrap_or_default(),
            n_instances: self.n_instances,
            questions_per_attribute: self.questions_per_attribute,
            n_ood_entities: self.n_ood_entities,
            n_general_entities: self.n_general_entities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub prefix_prob: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
    /// Also plant the out-of-distribution and general splits.
    pub include_ood: bool,
    pub include_general: bool,
    pub seed: Option<u64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            prefix_prob: p.prefix_prob,
            weight_decay: p.weight_decay,
            cosine_decay: p.cosine_decay,
            include_ood: true,
            include_general: true,
            seed: None,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed.unwrap_or_default(),
            prefix_prob: self.prefix_prob,
            weight_decay: self.weight_decay,
            cosine_decay: self.cosine_decay,
            trainable_modules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate with the robustness prefix as well.
    pub robustness: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { robustness: true }
    }
}

/// One unlearning run. Unset fields take the method's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub method: Method,
    #[serde(flatten)]
    pub settings: Map<String, Value>,
}

impl RunSpec {
    pub fn new(name: impl Into<String>, method: Method) -> Self {
        Self {
            name: name.into(),
            method,
            settings: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.settings.insert(key.into(), value.into());
        self
    }

    /// Method defaults overlaid with `settings`.
    pub fn unlearn_config(&self, default_seed: u64) -> Result<UnlearnConfig, CliError> {
        let base = UnlearnConfig::new(self.method).with_seed(default_seed);
        let Value::Object(mut merged) = serde_json::to_value(base)? else {
            unreachable!("config serializes to an object");
        };
        for (k, v) in &self.settings {
            if k == "method" {
                return Err(CliError::Config(format!(
                    "run {:?}: method is set once, outside the settings",
                    self.name
                )));
            }
            merged.insert(k.clone(), v.clone());
        }
        let config: UnlearnConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Config(format!("run {:?}: {e}", self.name)))?;
        config
            .validate()
            .map_err(|e| CliError::Config(format!("run {:?}: {e}", self.name)))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Fills every seed left unset below.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub runs: Vec<RunSpec>,
}

/// The six-method comparison on the default benchmark.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.resolved()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn default_experiment() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled config parses")
    }

    /// Makes every seed and run setting explicit and checks run names.
    pub fn resolved(mut self) -> Result<Self, CliError> {
        let seed = self.seed;
        self.model.seed.get_or_insert(seed);
        self.data.seed.get_or_insert(seed);
        self.pretrain.seed.get_or_insert(seed);
        let mut names = BTreeSet::new();
        for run in &mut self.runs {
            if run.name.is_empty() || !run.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(CliError::Config(format!(
                    "run name {:?} must be nonempty and use only letters, digits, '-', '_' or '.'",
                    run.name
                )));
            }
            if run.name == crate::pipeline::VANILLA {
                return Err(CliError::Config(format!("run name {:?} is reserved", run.name)));
            }
            if !names.insert(run.name.clone()) {
                return Err(CliError::Config(format!("duplicate run name {:?}", run.name)));
            }
            let full = run.unlearn_config(seed)?;
            let Value::Object(mut settings) = serde_json::to_value(full)? else {
                unreachable!("config serializes to an object");
            };
            settings.remove("method");
            settings.retain(|_, v| !v.is_null());
            run.settings = settings;
        }
        Ok(self)
    }

    /// Replaces the global seed and every derived seed.
    pub fn override_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = Some(seed);
        self.data.seed = Some(seed);
        self.pretrain.seed = Some(seed);
        for run in &mut self.runs {
            run.settings.insert("seed".into(), seed.into());
        }
        self
    }

    pub fn enable_timing(mut self) -> Self {
        for run in &mut self.runs {
            run.settings.insert("timing".into(), true.into());
        }
        self
    }

    pub fn run(&self, name: &str) -> Option<&RunSpec> {
        self.runs.iter().find(|r| r.name == name)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_has_six_runs_with_explicit_seeds() {
        let c = ExperimentConfig::default_experiment();
        assert_eq!(c.runs.len(), 6);
        assert_eq!(c.model.seed, Some(c.seed));
        for r in &c.runs {
            let u = r.unlearn_config(999).unwrap();
            assert_eq!(u.seed, c.seed);
            assert_eq!(u.method, r.method);
            assert_eq!((u.epochs, u.batch_size, u.accum_steps), (2, 1, 16));
        }
    }

    #[test]
    fn run_overrides_merge_onto_method_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
            name = "t"
            seed = 4
            [[runs]]
            name = "gd-ood"
            method = "ga_gd"
            retain_source = "ood"
            learning_rate = 0.01
            "#,
        )
        .unwrap();
        let u = c.runs[0].unlearn_config(0).unwrap();
        assert_eq!(u.learning_rate, 0.01);
        assert_eq!(u.retain_source, unlearn_core::unlearn::RetainSource::Ood);
        assert_eq!(u.seed, 4);
        assert_eq!(u.accum_steps, 16);
    }

    #[test]
    fn bad_configs_rejected() {
        let dup = r#"
            name = "t"
            seed = 0
            [[runs]]
            name = "a"
            method = "ga"
            [[runs]]
            name = "a"
            method = "ga_gd"
        "#;
        assert!(matches!(ExperimentConfig::from_toml(dup), Err(CliError::Config(_))));
        let unknown = "name = \"t\"\nseed = 0\n[[runs]]\nname = \"a\"\nmethod = \"ga\"\nlearning_rte = 1.0\n";
        assert!(ExperimentConfig::from_toml(unknown).is_err());
        let no_retain = "name = \"t\"\nseed = 0\n[[runs]]\nname = \"a\"\nmethod = \"ga_gd\"\nretain_source = \"none\"\n";
        assert!(ExperimentConfig::from_toml(no_retain).is_err());
        assert!(ExperimentConfig::from_toml("name = \"t\"\nseed = 0\n[model]\nwidth = 3\n").is_err());
        let reserved = "name = \"t\"\nseed = 0\n[[runs]]\nname = \"vanilla\"\nmethod = \"ga\"\n";
        assert!(ExperimentConfig::from_toml(reserved).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default_experiment();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let c = ExperimentConfig::default_experiment().override_seed(77).resolved().unwrap();
        assert_eq!(c.data.seed, Some(77));
        assert_eq!(c.pretrain.seed, Some(77));
        assert!(c.runs.iter().all(|r| r.unlearn_config(0).unwrap().seed == 77));
    }
}
