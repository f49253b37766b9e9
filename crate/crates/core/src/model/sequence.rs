use serde::{Deserialize, Serialize};

use super::ModelError;

/// Question tokens followed by answer tokens; `prompt_len` marks the split.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, prompt_len: usize) -> Result<Self, ModelError> {
        if prompt_len > tokens.len() {
            return Err(ModelError::InvalidSequence(format!(
                "prompt_len {prompt_len} exceeds length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<(), ModelError> {
        match self.tokens.iter().find(|&&t| t >= vocab_size) {
            Some(&t) => Err(ModelError::TokenOutOfRange { token: t, vocab_size }),
            None => Ok(()),
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// Same prompt, different answer tokens.
    pub fn with_answer(&self, answer: &[usize]) -> Self {
        let mut tokens = self.prompt().to_vec();
        tokens.extend_from_slice(answer);
        Self {
            tokens,
            prompt_len: self.prompt_len,
        }
    }

    /// Prepends `prefix` to the prompt.
    pub fn with_prefix(&self, prefix: &[usize]) -> Self {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(&self.tokens);
        Self {
            tokens,
            prompt_len: self.prompt_len + prefix.len(),
        }
    }
}
