//! Whitespace tokenization over a vocabulary learned from the training corpus.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<sep>", "<bos>", "<eos>"];

/// A text-to-ids mapping usable by the encoders. Special ids are fixed
/// (`PAD`, `UNK`, `SEP`, `BOS`, `EOS`) for every implementation.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    /// Stable digest of the vocabulary, recorded in checkpoint manifests.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Question,
    Passage,
}

/// Truncation lengths for the two input roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLimits {
    pub question: usize,
    pub passage: usize,
}

impl Default for TokenLimits {
    fn default() -> Self {
        TokenLimits {
            question: 50,
            passage: 512,
        }
    }
}

impl TokenLimits {
    pub fn for_role(&self, role: Role) -> usize {
        match role {
            Role::Question => self.question,
            Role::Passage => self.passage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    token_ids: Vec<u32>,
    max_len: usize,
}

impl TokenSequence {
    /// Truncates `ids` to `max_len`.
    pub fn new(mut ids: Vec<u32>, max_len: usize) -> Self {
        ids.truncate(max_len);
        TokenSequence {
            token_ids: ids,
            max_len,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn tokenize(
    text: &str,
    role: Role,
    tokenizer: &dyn Tokenizer,
    limits: &TokenLimits,
) -> Result<TokenSequence> {
    let ids = tokenizer.encode(text);
    let seq = TokenSequence::new(ids, limits.for_role(role));
    if seq.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(seq)
}

/// Lowercases, splits on whitespace and strips punctuation from word edges.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|w| {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric());
        (!w.is_empty()).then(|| w.to_lowercase())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from `texts`, keeping words seen at least
    /// `min_count` times. Words are ordered by descending frequency, then
    /// alphabetically, after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(w, _)| w))
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.tokens)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint(format!(
                "{} does not start with the special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

impl Tokenizer for Vocab {
    fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > EOS)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.len()
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}
