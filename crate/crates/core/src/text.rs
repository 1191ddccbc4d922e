//! Character-level symbol set used as the acoustic model's "phonemes".

use crate::error::{Error, Result};

const SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz',.?!-";

/// Index 0 is reserved for padding.
pub const VOCAB_SIZE: usize = SYMBOLS.len() + 1;

/// Validated token sequence; never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("phoneme sequence is empty"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    /// Lowercases `text` and drops characters outside the symbol set.
    pub fn from_text(text: &str) -> Result<Self> {
        let ids: Vec<usize> = normalize(text)
            .chars()
            .filter_map(|c| SYMBOLS.find(c).map(|i| i + 1))
            .collect();
        Self::new(ids, VOCAB_SIZE)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The character behind a token id; `None` for padding or out-of-range ids.
pub fn symbol(id: usize) -> Option<char> {
    id.checked_sub(1).and_then(|i| SYMBOLS.chars().nth(i))
}

/// Lowercase, collapse whitespace, keep only known symbols.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let kept: String = lower
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| SYMBOLS.contains(*c))
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}
