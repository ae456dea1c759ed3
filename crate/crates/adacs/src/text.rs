//! Character-level vocabulary and tokenization.
//!
//! The decoder has to be able to emit bias phrases that never occurred in
//! training, so tokens are single characters: copying through attention works
//! at any granularity the bias encoder has seen. Spaces are encoded as a real
//! `WORD_SEP` token so tagged spans can cross word boundaries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Fixed special token ids. These hold for every vocabulary regardless of corpus.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const WORD_SEP: usize = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} out of range (vocabulary size {1})")]
    IdOutOfRange(usize, usize),
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
}

/// Character vocabulary with five fixed specials followed by the corpus
/// characters sorted by code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<char, usize>,
    id_to_token: Vec<Option<char>>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus: the 5 specials plus every distinct
    /// character, sorted by code point. Deterministic and order-independent
    /// in the corpus.
    pub fn build(corpus: &[impl AsRef<str>]) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut chars: Vec<char> = corpus
            .iter()
            .flat_map(|s| s.as_ref().chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        let mut id_to_token: Vec<Option<char>> = vec![None; SPECIAL_NAMES.len()];
        let mut token_to_id = BTreeMap::new();
        for c in chars {
            token_to_id.insert(c, id_to_token.len());
            id_to_token.push(Some(c));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Vocabulary size V, specials included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.token_to_id.get(&c).copied()
    }

    /// One token per character; spaces map to `WORD_SEP`, characters outside
    /// the vocabulary to `UNK`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let ids = text
            .chars()
            .map(|c| {
                if c == ' ' {
                    WORD_SEP
                } else {
                    self.token_to_id.get(&c).copied().unwrap_or(UNK)
                }
            })
            .collect();
        TokenSeq { ids }
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary text. Specials
    /// other than `WORD_SEP` render as empty.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, TextError> {
        let mut out = String::with_capacity(seq.len());
        for &id in &seq.ids {
            if id >= self.size() {
                return Err(TextError::IdOutOfRange(id, self.size()));
            }
            if id == WORD_SEP {
                out.push(' ');
            } else if let Some(c) = self.id_to_token[id] {
                out.push(c);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            tokens: self
                .id_to_token
                .iter()
                .flatten()
                .map(|c| c.to_string())
                .collect(),
        };
        serde_json::to_string(&file).expect("vocabulary serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, TextError> {
        let file: VocabFile =
            serde_json::from_str(s).map_err(|e| TextError::BadVocabFile(e.to_string()))?;
        if file.specials != SPECIAL_NAMES {
            return Err(TextError::BadVocabFile(format!(
                "expected specials {:?}, got {:?}",
                SPECIAL_NAMES, file.specials
            )));
        }
        let mut id_to_token: Vec<Option<char>> = vec![None; SPECIAL_NAMES.len()];
        let mut token_to_id = BTreeMap::new();
        let mut prev: Option<char> = None;
        for tok in &file.tokens {
            let mut it = tok.chars();
            let c = match (it.next(), it.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(TextError::BadVocabFile(format!(
                        "token {tok:?} is not a single character"
                    )))
                }
            };
            if prev.is_some_and(|p| p >= c) {
                return Err(TextError::BadVocabFile(
                    "tokens not strictly sorted by code point".into(),
                ));
            }
            prev = Some(c);
            token_to_id.insert(c, id_to_token.len());
            id_to_token.push(Some(c));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Every id in range and no PAD interior to the sequence.
    pub fn validate(&self, vocab_size: usize) -> Result<(), TextError> {
        for &id in &self.ids {
            if id >= vocab_size {
                return Err(TextError::IdOutOfRange(id, vocab_size));
            }
        }
        Ok(())
    }
}
