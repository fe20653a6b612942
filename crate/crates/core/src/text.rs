//! Whitespace tokenizer with BERT-style special tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

pub const DEFAULT_MAX_LEN: usize = 24;

/// Lowercase, drop everything outside `[a-z0-9]` and whitespace, split.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Ids by descending frequency, ties in lexicographic order, after the
    /// reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for q in corpus {
            for tok in normalize(q.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
            .expect("normalized tokens are unique")
    }

    /// Vocabulary whose non-reserved ids follow `tokens` in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), RESERVED + i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - RESERVED).map(String::as_str)
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, question: &str, max_len: usize) -> TokenSequence {
        tokenize(question, self, max_len)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_tokens(file.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// `[CLS] words.. [SEP] [PAD]..`, words truncated to `max_len - 2`.
pub fn tokenize(question: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let words = normalize(question);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        words
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    let attention_mask = (0..max_len).map(|i| u8::from(i < true_length)).collect();
    TokenSequence {
        ids,
        attention_mask,
        true_length,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = Vocabulary::build(&["is water present", "is forest present"]);
        assert_eq!(v.id("is"), Some(4));
        assert_eq!(v.id("present"), Some(5));
        assert_eq!(v.id("forest"), Some(6));
        assert_eq!(v.id("water"), Some(7));
        assert_eq!(v.size(), 8);
        assert_eq!(v, Vocabulary::build(&["is water present", "is forest present"]));
    }

    #[test]
    fn empty_corpus_is_reserved_only() {
        let v = Vocabulary::build::<&str>(&[]);
        assert_eq!(v.size(), 4);
        assert_eq!(v.token(CLS), Some("[CLS]"));
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&["is water present", "is forest present"]);
        let t = tokenize("is water present", &v, 6);
        assert_eq!(t.ids, vec![CLS, 4, 7, 5, SEP, PAD]);
        assert_eq!(t.attention_mask, vec![1, 1, 1, 1, 1, 0]);
        assert_eq!(t.true_length, 5);

        let t = tokenize("", &v, 4);
        assert_eq!(t.ids, vec![CLS, SEP, PAD, PAD]);

        let t = tokenize("Is a zeppelin present?", &v, 8);
        assert_eq!(t.ids[..6], [CLS, 4, UNK, UNK, 5, SEP]);

        let t = tokenize("is water present", &v, 3);
        assert_eq!(t.ids, vec![CLS, 4, SEP]);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(&["how many discs are there", "is there a disc"]);
        let file: VocabFile = serde_json::from_str(&v.to_json()).unwrap();
        assert_eq!(Vocabulary::from_tokens(file.tokens).unwrap(), v);
    }

    proptest! {
        #[test]
        fn tokenize_is_total_and_consistent(q in any::<String>(), max_len in 2usize..12) {
            let v = Vocabulary::build(&["is there a disc", "how many squares are there"]);
            let t = tokenize(&q, &v, max_len);
            prop_assert_eq!(t.ids.len(), max_len);
            prop_assert_eq!(t.ids[0], CLS);
            prop_assert_eq!(t.ids[t.true_length - 1], SEP);
            for (i, (&id, &m)) in t.ids.iter().zip(&t.attention_mask).enumerate() {
                prop_assert_eq!(m == 0, id == PAD);
                prop_assert_eq!(m == 1, i < t.true_length);
            }
            let words: Vec<String> = normalize(&q).into_iter().take(max_len - 2).collect();
            let inner = &t.ids[1..t.true_length - 1];
            prop_assert_eq!(inner.len(), words.len());
            for (id, w) in inner.iter().zip(&words) {
                if *id != UNK {
                    prop_assert_eq!(v.token(*id).unwrap(), w.as_str());
                } else {
                    prop_assert!(v.id(w).is_none());
                }
            }
        }
    }
}
