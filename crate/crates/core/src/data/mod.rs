//! Synthetic scoped QA benchmark: fictitious author profiles split into
//! knowledge that must be forgotten and knowledge that must survive.

mod copyright;
mod generator;
mod io;
mod pools;
mod vocab;

pub use copyright::generate_copyright_benchmark;
pub use generator::{generate_benchmark, generate_profiles, AuthorProfile, BenchmarkParams};
pub use io::{load_dataset, read_dataset, save_dataset, vocab_path, write_dataset, FORMAT_VERSION};
pub use vocab::{Vocab, EOA, SEP};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenSequence;

/// Prompt prepended to every question by the robustness evaluation. Its
/// words are always part of the vocabulary.
pub const ROBUSTNESS_PREFIX: &str = "you are a helpful assistant .";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("template pool exhausted: {what} needs {required} distinct values, pool has {available}")]
    PoolExhausted {
        what: &'static str,
        required: usize,
        available: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: attribute {attribute:?} belongs to scope {expected:?}, found {found:?}")]
    TaxonomyViolation {
        line: usize,
        attribute: Attribute,
        expected: Scope,
        found: Scope,
    },
    #[error("token {token:?} is not in the vocabulary")]
    UnknownToken { token: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Unlearn,
    Retention,
}

/// Attribute tag of a QA example. The scope of each attribute is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Name,
    Genre,
    Born,
    Awards,
    Parents,
    Email,
    Address,
    Revision,
    Extension,
    MetaInfo,
    Review,
    Recommendation,
    /// Facts from the auxiliary out-of-distribution and general corpora.
    Fact,
}

impl Attribute {
    pub const ALL: [Attribute; 13] = [
        Attribute::Name,
        Attribute::Genre,
        Attribute::Born,
        Attribute::Awards,
        Attribute::Parents,
        Attribute::Email,
        Attribute::Address,
        Attribute::Revision,
        Attribute::Extension,
        Attribute::MetaInfo,
        Attribute::Review,
        Attribute::Recommendation,
        Attribute::Fact,
    ];

    pub const PRIVACY: [Attribute; 7] = [
        Attribute::Name,
        Attribute::Genre,
        Attribute::Born,
        Attribute::Awards,
        Attribute::Parents,
        Attribute::Email,
        Attribute::Address,
    ];

    pub fn scope(self) -> Scope {
        match self {
            Attribute::Parents | Attribute::Email | Attribute::Address => Scope::Unlearn,
            Attribute::Revision | Attribute::Extension => Scope::Unlearn,
            _ => Scope::Retention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unlearn,
    Retention,
    Ood,
    General,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Unlearn, Split::Retention, Split::Ood, Split::General];

    /// Scope every example of this split must carry.
    pub fn scope(self) -> Scope {
        match self {
            Split::Unlearn => Scope::Unlearn,
            _ => Scope::Retention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub instance_id: u32,
    pub attribute: Attribute,
    pub scope: Scope,
    pub question: String,
    pub answer: String,
}

impl QaExample {
    pub(crate) fn new(
        id: String,
        instance_id: u32,
        attribute: Attribute,
        question: String,
        answer: String,
    ) -> Self {
        Self {
            id,
            instance_id,
            attribute,
            scope: attribute.scope(),
            question,
            answer,
        }
    }
}

/// A QA example turned into `question <sep> answer <eoa>` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: String,
    pub attribute: Attribute,
    pub seq: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopedDataset {
    pub unlearn: Vec<QaExample>,
    pub retention: Vec<QaExample>,
    pub ood: Vec<QaExample>,
    pub general: Vec<QaExample>,
    pub vocab: Vocab,
}

impl ScopedDataset {
    /// Builds a dataset whose vocabulary covers every example and the
    /// robustness prefix.
    pub fn from_splits(
        unlearn: Vec<QaExample>,
        retention: Vec<QaExample>,
        ood: Vec<QaExample>,
        general: Vec<QaExample>,
    ) -> Self {
        let texts = unlearn
            .iter()
            .chain(&retention)
            .chain(&ood)
            .chain(&general)
            .flat_map(|e| [e.question.as_str(), e.answer.as_str()])
            .chain([ROBUSTNESS_PREFIX]);
        let vocab = Vocab::from_texts(texts);
        Self {
            unlearn,
            retention,
            ood,
            general,
            vocab,
        }
    }

    pub fn split(&self, split: Split) -> &[QaExample] {
        match split {
            Split::Unlearn => &self.unlearn,
            Split::Retention => &self.retention,
            Split::Ood => &self.ood,
            Split::General => &self.general,
        }
    }

    pub fn encode(&self, split: Split) -> Result<Vec<EncodedExample>, DataError> {
        self.split(split)
            .iter()
            .map(|e| self.vocab.encode_example(e))
            .collect()
    }

    /// Longest encoded sequence over all splits.
    pub fn max_sequence_len(&self) -> usize {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .map(|e| self.vocab.sequence_len(e))
            .max()
            .unwrap_or(0)
    }

    pub fn stats(&self) -> SplitStats {
        let mut stats = SplitStats::default();
        for a in Attribute::PRIVACY {
            stats.per_attribute.insert(a, 0);
        }
        for split in Split::ALL {
            let examples = self.split(split);
            stats.per_split.insert(split, examples.len());
            for e in examples {
                *stats.per_attribute.entry(e.attribute).or_insert(0) += 1;
            }
        }
        stats.total = stats.per_split.values().sum();
        stats
    }
}

/// Per-split counts and a per-attribute histogram.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_attribute: BTreeMap<Attribute, usize>,
}

pub fn split_stats(dataset: &ScopedDataset) -> SplitStats {
    dataset.stats()
}
