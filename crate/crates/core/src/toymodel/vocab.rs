use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

pub const DEFAULT_VOCAB_SIZE: usize = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocab must start with {BOS}, {EOS}, {UNK}")]
    MissingReserved,
    #[error("token `{0}` appears more than once")]
    Duplicate(String),
    #[error("vocab size {0} is too small to hold the reserved tokens")]
    TooSmall(usize),
}

/// Splits text into word runs (alphanumerics and `_`) and single punctuation
/// characters. Whitespace separates tokens and is dropped.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word = c.is_alphanumeric() || c == '_';
        if word {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Token count under the toy tokenizer, excluding BOS/EOS framing.
pub fn count_tokens(text: &str) -> usize {
    split_words(text).len()
}

/// Ordered token list. Indices 0..3 are always BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = VocabError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < 3 || tokens[0] != BOS || tokens[1] != EOS || tokens[2] != UNK {
            return Err(VocabError::MissingReserved);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by the given words, in order.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self, VocabError> {
        let mut tokens: Vec<String> = [BOS, EOS, UNK].map(String::from).to_vec();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Most frequent words across `texts`, ties broken lexicographically,
    /// capped so the whole vocab (reserved included) has at most `max_size`
    /// entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self, VocabError> {
        if max_size < 3 {
            return Err(VocabError::TooSmall(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| ![BOS, EOS, UNK].contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words: Vec<&str> = ranked.into_iter().take(max_size - 3).map(|(w, _)| w).collect();
        Self::with_words(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, w1, .., wn, EOS]` with out-of-vocab words mapped to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS_ID];
        ids.extend(split_words(text).into_iter().map(|w| self.id(w).unwrap_or(UNK_ID)));
        ids.push(EOS_ID);
        ids
    }

    /// Target form of a completion: the tokenization without its leading BOS,
    /// so it ends with EOS and is scored starting from BOS.
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.tokenize(text);
        ids.remove(0);
        ids
    }

    /// Space-joined surface form, skipping BOS/EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS_ID && i != EOS_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
