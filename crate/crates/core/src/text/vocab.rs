use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNKNOWN: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;
const RESERVED: usize = 4;

pub const DEFAULT_MAX_LEN: usize = 16;

/// Whitespace word vocabulary. Word ids follow the sorted word list, so
/// the same set of sentences always yields the same ids whatever their
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerVocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    max_len: usize,
}

impl TokenizerVocab {
    pub fn build<S: AsRef<str>>(sentences: &[S], max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Usage(format!("max sequence length must be at least 3, got {max_len}")));
        }
        let unique: BTreeSet<&str> = sentences.iter().flat_map(|s| s.as_ref().split_whitespace()).collect();
        let words: Vec<String> = unique.into_iter().map(str::to_string).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i + RESERVED)).collect();
        Ok(TokenizerVocab { words, ids, max_len })
    }

    /// Vocabulary size including the reserved ids.
    pub fn len(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNKNOWN)
    }

    /// `[start, words.., end, pad..]`, exactly `max_len` ids. Long sentences
    /// are cut so the end marker survives.
    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.max_len);
        out.push(START);
        out.extend(sentence.split_whitespace().take(self.max_len - 2).map(|w| self.id(w)));
        out.push(END);
        out.resize(self.max_len, PAD);
        out
    }

    /// Position of the end marker in a tokenized sequence.
    pub fn end_position(ids: &[usize]) -> usize {
        ids.iter().position(|&i| i == END).expect("tokenized sequences contain an end marker")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sentence() {
        let v = TokenizerVocab::build(&["a b"], 6).unwrap();
        assert_eq!(v.tokenize(""), vec![START, END, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn two_known_words() {
        let v = TokenizerVocab::build(&["red hat"], 5).unwrap();
        assert_eq!(v.tokenize("red hat"), vec![START, v.id("red"), v.id("hat"), END, PAD]);
        assert_eq!(v.id("hat"), 4);
        assert_eq!(v.id("red"), 5);
        assert_eq!(v.tokenize("blue hat")[1], UNKNOWN);
    }

    #[test]
    fn truncation_keeps_end() {
        let v = TokenizerVocab::build(&["a b c d e f"], 4).unwrap();
        let ids = v.tokenize("a b c d e f");
        assert_eq!(ids.len(), 4);
        assert_eq!(ids, vec![START, v.id("a"), v.id("b"), END]);
        assert_eq!(TokenizerVocab::end_position(&ids), 3);
    }

    #[test]
    fn ids_ignore_sentence_order() {
        let a = TokenizerVocab::build(&["x y", "z w"], 8).unwrap();
        let b = TokenizerVocab::build(&["z w", "x y"], 8).unwrap();
        assert_eq!(a, b);
        assert!(TokenizerVocab::build(&["x"], 2).is_err());
    }
}
