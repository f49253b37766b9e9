use std::collections::{BTreeSet, HashMap};

use crate::model::TokenSequence;

use super::{DataError, EncodedExample, QaExample};

pub const SEP: &str = "<sep>";
pub const EOA: &str = "<eoa>";

/// Word-level token table. Reserved tokens come first, then every other
/// word in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| *w != SEP && *w != EOA)
            .collect();
        let tokens = [SEP, EOA]
            .into_iter()
            .chain(words)
            .map(String::from)
            .collect();
        Self::from_tokens(tokens).expect("unique by construction")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < 2 || tokens[0] != SEP || tokens[1] != EOA {
            return Err(DataError::Vocab(format!(
                "must start with {SEP} and {EOA}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Vocab(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sep(&self) -> usize {
        0
    }

    pub fn eoa(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| DataError::UnknownToken {
                    token: w.to_string(),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn sequence_len(&self, e: &QaExample) -> usize {
        e.question.split_whitespace().count() + e.answer.split_whitespace().count() + 2
    }

    /// `question <sep> answer <eoa>`, with the prompt ending at `<sep>`.
    pub fn encode_example(&self, e: &QaExample) -> Result<EncodedExample, DataError> {
        let mut tokens = self.encode(&e.question)?;
        tokens.push(self.sep());
        let prompt_len = tokens.len();
        tokens.extend(self.encode(&e.answer)?);
        tokens.push(self.eoa());
        let seq = TokenSequence::new(tokens, prompt_len).expect("prompt within sequence");
        Ok(EncodedExample {
            id: e.id.clone(),
            attribute: e.attribute,
            seq,
        })
    }
}
