//! Fixed token layout shared by every corpus and task.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lm::BOS;

pub const QUERY: usize = 1;
pub const VERBALIZERS: [usize; 2] = [2, 3];
pub const CUES: [usize; 2] = [4, 5];
pub const NEEDLE_TRIGGER: usize = 6;
pub const PARITY_TRIGGER: usize = 7;
pub const FIRST_WORD: usize = 8;

/// Smallest vocabulary holding the special tokens plus one word per grammar class.
pub const MIN_VOCAB: usize = FIRST_WORD + 3;

const MAX_CLASS_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "task vocabulary needs at least {MIN_VOCAB} tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Ordinary content tokens.
    pub fn words(&self) -> Range<usize> {
        FIRST_WORD..self.size
    }

    /// Words of grammar class `c` (0 subject, 1 verb, 2 object). Words past
    /// the three classes never appear in grammar sentences.
    pub fn class(&self, c: usize) -> Range<usize> {
        let width = ((self.size - FIRST_WORD) / 3).min(MAX_CLASS_SIZE);
        let start = FIRST_WORD + c * width;
        start..start + width
    }

    pub fn class_of(&self, token: usize) -> Option<usize> {
        (0..3).find(|&c| self.class(c).contains(&token))
    }

    pub fn is_special(token: usize) -> bool {
        token == BOS || token < FIRST_WORD
    }
}
