use crate::generator::{Vocabulary, UNK};

use super::MotionSample;

/// Lowercases and splits on whitespace and ASCII punctuation; punctuation
/// is dropped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Canonical form of `text`: lowercase words joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer { vocab }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.vocab.id(&w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.vocab.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Vocabulary over every query and answer word, in first-seen order.
pub fn build_vocabulary<'a>(samples: impl IntoIterator<Item = &'a MotionSample>) -> Vocabulary {
    let mut v = Vocabulary::new();
    for s in samples {
        for w in words(&s.query).chain(words(&s.answer)) {
            v.insert(&w);
        }
    }
    v
}
