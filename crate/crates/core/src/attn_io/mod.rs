//! Reading and writing attention dumps (ATNM) and word-segment TSV files.

mod atnm;
mod tsv;

pub use atnm::{read_dump, read_dump_file, write_dump, write_dump_file, AttentionDump, ATNM_MAGIC, ATNM_VERSION};
pub use tsv::{
    read_alignment_file, read_reference_alignments, write_segments, write_segments_file, SegmentsByUtterance,
};

use serde::{Deserialize, Serialize};

/// One output token and the word it belongs to. `word_index` is `None` for
/// special, BOS/EOS and punctuation-only tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub word_index: Option<u32>,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, word_index: Option<u32>) -> Self {
        TokenRecord {
            text: text.into(),
            word_index,
        }
    }

    pub fn special(text: impl Into<String>) -> Self {
        Self::new(text, None)
    }

    pub fn is_special(&self) -> bool {
        self.word_index.is_none()
    }

    /// True for tokens made only of whitespace (character-level separators).
    pub fn is_space(&self) -> bool {
        !self.text.is_empty() && self.text.chars().all(char::is_whitespace)
    }
}

/// A word with start and end times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSegment {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

impl WordSegment {
    pub fn new(word: impl Into<String>, start: f64, end: f64) -> Self {
        WordSegment {
            word: word.into(),
            start,
            end,
        }
    }
}
