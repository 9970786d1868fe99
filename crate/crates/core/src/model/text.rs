use alloc::string::ToString;
use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::synth;

/// A tokenized prompt over the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptEncoding {
    tokens: Vec<usize>,
    special_index: Option<usize>,
}

impl PromptEncoding {
    pub fn from_tokens(tokens: Vec<usize>, max_len: usize) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(Error::Prompt(format!(
                "prompt length {} outside 1..={max_len}",
                tokens.len()
            )));
        }
        let vocab = synth::vocabulary().len();
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Prompt(format!("token id {t} outside vocabulary")));
        }
        let special = synth::special_token_id();
        let mut hits = tokens.iter().enumerate().filter(|(_, &t)| t == special);
        let special_index = hits.next().map(|(i, _)| i);
        if hits.next().is_some() {
            return Err(Error::Prompt("the subject token may appear once".to_string()));
        }
        Ok(Self { tokens, special_index })
    }

    pub fn from_words(words: &[&str], max_len: usize) -> Result<Self> {
        let tokens = words
            .iter()
            .map(|w| synth::token_id(w).ok_or_else(|| Error::Prompt(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens, max_len)
    }

    /// Whitespace-separated words.
    pub fn parse(text: &str, max_len: usize) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        Self::from_words(&words, max_len)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Zero-based position of the subject token, if present.
    pub fn special_index(&self) -> Option<usize> {
        self.special_index
    }

    pub fn words(&self) -> Vec<&'static str> {
        let vocab = synth::vocabulary();
        self.tokens.iter().map(|&t| vocab[t]).collect()
    }

    /// `[L, text_dim]` rows gathered from the embedding table on the tape.
    pub fn embed(&self, g: &mut Graph, table: Var) -> Var {
        let dim = g.shape(table)[1];
        let idx = self
            .tokens
            .iter()
            .flat_map(|&t| (0..dim).map(move |j| (t * dim + j) as u32))
            .collect();
        g.gather(table, idx, &[self.tokens.len(), dim])
    }
}
