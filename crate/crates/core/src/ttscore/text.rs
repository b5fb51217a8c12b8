use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character inventory. Id 0 is reserved for characters outside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_chars(chars: &str) -> Self {
        Self::from_texts([chars])
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    /// Embedding rows needed, including the unknown slot.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<TextSequence> {
        let ids = text
            .chars()
            .map(|c| self.chars.binary_search(&c).map_or(0, |i| i as u32 + 1))
            .collect();
        TextSequence::new(ids, self.size())
    }
}

/// Token ids of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    token_ids: Vec<u32>,
}

impl TextSequence {
    pub fn new(token_ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::invalid("empty text"));
        }
        if let Some(bad) = token_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { token_ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}
