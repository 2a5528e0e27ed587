//! Whitespace tokenizer over a synthetic vocabulary.
//!
//! The vocabulary is a pure function of its size, so a model checkpoint
//! (which records `vocab_size`) fully determines how text maps to ids.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Punctuation, cue words and answer words shared by every synthetic task.
pub const FUNCTION_WORDS: [&str; 19] = [
    ".", ",", "?", "!", "\"", "it", "was", "the", "and", "good", "bad", "yes", "no", "maybe", "instead", "high",
    "low", "so", "not",
];

pub const MIN_VOCAB: usize = 64;

/// Id ranges of the synthetic word classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub positive: core::ops::Range<u32>,
    pub negative: core::ops::Range<u32>,
    pub topics: core::ops::Range<u32>,
    pub fillers: core::ops::Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    layout: Layout,
}

impl Vocab {
    /// Specials, function words, then positive keywords `pos*`, negative
    /// keywords `neg*`, topic words `t*` and fillers `w*`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::Config(format!("vocabulary size {size} below minimum {MIN_VOCAB}")));
        }
        let reserved = SPECIALS.len() + FUNCTION_WORDS.len();
        let rest = size - reserved;
        let kw = (rest / 16).max(4);
        let topics = (rest / 8).max(8);
        let mut words: Vec<String> = SPECIALS.iter().chain(FUNCTION_WORDS.iter()).map(|s| s.to_string()).collect();
        let start = words.len() as u32;
        words.extend((0..kw).map(|i| format!("pos{i}")));
        words.extend((0..kw).map(|i| format!("neg{i}")));
        words.extend((0..topics).map(|i| format!("t{i}")));
        let filler_start = words.len() as u32;
        let n_fill = size - words.len();
        words.extend((0..n_fill).map(|i| format!("w{i}")));
        let kw = kw as u32;
        let layout = Layout {
            positive: start..start + kw,
            negative: start + kw..start + 2 * kw,
            topics: start + 2 * kw..filler_start,
            fillers: filler_start..size as u32,
        };
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self { words, index, layout })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Like [`Vocab::id`] but failing with the unknown word.
    pub fn require(&self, word: &str) -> Result<u32> {
        self.id(word).ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("[UNK]")
    }

    /// Whitespace tokenization; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_partitions_vocab() {
        for size in [64, 100, 256, 1000] {
            let v = Vocab::synthetic(size).unwrap();
            assert_eq!(v.len(), size);
            let l = v.layout();
            assert_eq!(l.positive.end, l.negative.start);
            assert_eq!(l.negative.len(), l.positive.len());
            assert_eq!(l.fillers.end as usize, size);
            assert!(l.fillers.len() >= 16);
        }
        assert!(Vocab::synthetic(63).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::synthetic(64).unwrap();
        let ids = v.encode("it was good zzz");
        assert_eq!(ids[3], UNK);
        assert_eq!(v.decode(&ids[..3]), "it was good");
        assert_eq!(v.id("[MASK]"), Some(MASK));
    }
}
