//! Character re-tokenization, punctuation stripping, and mapping token spans
//! back to words.

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::attn_io::{TokenRecord, WordSegment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Wordpiece,
    Character,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenization {
    pub granularity: Granularity,
    pub tokens: Vec<TokenRecord>,
    pub words: Vec<String>,
}

impl Tokenization {
    /// Rebuild the word list from a token table. Special tokens must already be
    /// removed; word indices must cover `0..N` in non-decreasing order.
    pub fn from_tokens(tokens: Vec<TokenRecord>) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        for (k, tok) in tokens.iter().enumerate() {
            let w = tok
                .word_index
                .ok_or_else(|| Error::domain(format!("token {k} ({:?}) has no word index", tok.text)))?
                as usize;
            if w + 1 == words.len() {
                words[w].push_str(&tok.text);
            } else if w == words.len() {
                words.push(tok.text.clone());
            } else {
                return Err(Error::domain(format!(
                    "token {k} has word index {w}; expected {} or {}",
                    words.len().saturating_sub(1),
                    words.len()
                )));
            }
        }
        let words: Vec<String> = words.into_iter().map(|w| w.trim().to_string()).collect();
        if let Some(w) = words.iter().position(String::is_empty) {
            return Err(Error::domain(format!("word {w} has only whitespace tokens")));
        }
        let granularity = if tokens.iter().all(|t| t.text.chars().count() == 1) {
            Granularity::Character
        } else {
            Granularity::Wordpiece
        };
        Ok(Tokenization {
            granularity,
            tokens,
            words,
        })
    }
}

/// Split words into single-character tokens joined by space tokens. A space
/// token carries the index of the word that follows it.
pub fn to_characters<S: AsRef<str>>(words: &[S]) -> Result<Tokenization> {
    if words.is_empty() {
        return Err(Error::domain("cannot tokenize an empty word list"));
    }
    let mut tokens = Vec::new();
    for (w, word) in words.iter().enumerate() {
        let word = word.as_ref();
        if word.is_empty() {
            return Err(Error::domain(format!("word {w} is empty")));
        }
        if word.chars().any(char::is_whitespace) {
            return Err(Error::domain(format!("word {w} ({word:?}) contains whitespace")));
        }
        let index = Some(w as u32);
        if w > 0 {
            tokens.push(TokenRecord::new(" ", index));
        }
        tokens.extend(word.chars().map(|c| TokenRecord::new(c.to_string(), index)));
    }
    Ok(Tokenization {
        granularity: Granularity::Character,
        tokens,
        words: words.iter().map(|w| w.as_ref().to_string()).collect(),
    })
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}')
}

/// Remove punctuation from one word, keeping apostrophes that sit between two
/// letters or digits (`don't`, `rock'n'roll`).
pub fn strip_word(word: &str) -> String {
    let kept: Vec<char> = word
        .chars()
        .filter(|&c| is_apostrophe(c) || !is_punctuation(c))
        .collect();
    kept.iter()
        .enumerate()
        .filter(|&(i, &c)| {
            !is_apostrophe(c)
                || (i > 0 && i + 1 < kept.len() && kept[i - 1].is_alphanumeric() && kept[i + 1].is_alphanumeric())
        })
        .map(|(_, &c)| c)
        .collect()
}

/// Words with punctuation removed, plus a map from each input index to its
/// new index (`None` when the word became empty and was dropped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub words: Vec<String>,
    pub index_map: Vec<Option<usize>>,
}

pub fn strip_punctuation<S: AsRef<str>>(words: &[S]) -> Stripped {
    let mut out = Stripped {
        words: Vec::with_capacity(words.len()),
        index_map: Vec::with_capacity(words.len()),
    };
    for w in words {
        let s = strip_word(w.as_ref());
        if s.is_empty() {
            out.index_map.push(None);
        } else {
            out.index_map.push(Some(out.words.len()));
            out.words.push(s);
        }
    }
    out
}

/// Convert per-token frame spans into word segments. A word starts at the
/// first frame of its first non-space token and ends after the last frame of
/// its last non-space token.
pub fn group_tokens_to_words(
    tok: &Tokenization,
    token_spans: &[(usize, usize)],
    frame_duration: f64,
) -> Result<Vec<WordSegment>> {
    if token_spans.len() != tok.tokens.len() {
        return Err(Error::domain(format!(
            "{} spans for {} tokens",
            token_spans.len(),
            tok.tokens.len()
        )));
    }
    let mut bounds: Vec<Option<(usize, usize)>> = vec![None; tok.words.len()];
    for (t, &(start, end)) in tok.tokens.iter().zip(token_spans) {
        let Some(w) = t.word_index else { continue };
        if t.is_space() {
            continue;
        }
        let slot = bounds
            .get_mut(w as usize)
            .ok_or_else(|| Error::domain(format!("word index {w} out of range")))?;
        *slot = Some(match *slot {
            None => (start, end),
            Some((s, _)) => (s, end),
        });
    }
    tok.words
        .iter()
        .zip(bounds)
        .enumerate()
        .map(|(w, (word, b))| {
            let (start, end) = b.ok_or_else(|| Error::domain(format!("word {w} has no non-space token")))?;
            Ok(WordSegment::new(
                word.clone(),
                start as f64 * frame_duration,
                (end + 1) as f64 * frame_duration,
            ))
        })
        .collect()
}
