//! Greedy longest-match subword tokenizer with `##` continuation marks.
//!
//! Words are tokenized independently, so the subword-to-word alignment is
//! exact by construction instead of being recovered from character offsets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

const CONTINUATION: &str = "##";

/// Fixed-layout vocabulary: ids 0-4 are the reserved tokens, in order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from the full token list, which must start with the five
    /// reserved tokens.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config("vocab shorter than reserved table".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Config(alloc::format!(
                    "reserved token {r} missing at id {i} (found {})",
                    tokens[i]
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(alloc::format!("duplicate token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::InvalidId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A tokenized sentence with exact subword-to-word alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
    pub subwords: Vec<String>,
    /// Word index per position; None for [CLS]/[SEP].
    pub word_of: Vec<Option<usize>>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_special(&self, pos: usize) -> bool {
        self.word_of[pos].is_none()
    }

    /// Positions of non-special subwords, in order.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.is_special(p)).collect()
    }
}

/// Split one word by greedy longest prefix match. Remainders that cannot be
/// covered become a single [UNK] for the rest of the word.
fn tokenize_word(word: &str, vocab: &Vocab) -> Vec<usize> {
    let mut out = Vec::new();
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        for end in (start + 1..=chars.len()).rev() {
            let piece: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                piece
            } else {
                alloc::format!("{CONTINUATION}{piece}")
            };
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK);
                break;
            }
        }
    }
    out
}

/// Tokenize a list of words, adding [CLS]/[SEP] at the ends.
pub fn tokenize(words: &[&str], vocab: &Vocab) -> TokenizedSentence {
    let mut ids = alloc::vec![CLS];
    let mut word_of: Vec<Option<usize>> = alloc::vec![None];
    for (w, word) in words.iter().enumerate() {
        for id in tokenize_word(word, vocab) {
            ids.push(id);
            word_of.push(Some(w));
        }
    }
    ids.push(SEP);
    word_of.push(None);
    let subwords = ids
        .iter()
        .map(|&id| vocab.token(id).expect("id from this vocab").to_string())
        .collect();
    TokenizedSentence { ids, subwords, word_of }
}

/// Inverse id lookup; does not rejoin subwords.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter().map(|&id| vocab.token(id).map(ToString::to_string)).collect()
}
