//! Whitespace tokenizer, vocabulary and keyword masking.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::keywords::KeywordList;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]"];

pub const DEFAULT_MAX_LEN: usize = 32;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token ↔ id map. Ids `0..5` are the special tokens; words follow in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Specials followed by the given words, deduplicated and sorted.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    /// Every normalized word appearing in `captions`.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(captions.into_iter().flat_map(normalize))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }
}

/// `[SOS] words… [EOS]` padded with `[PAD]` to exactly `max_len` ids.
/// Captions longer than `max_len - 2` words are truncated.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for words")));
    }
    let words = normalize(text);
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(SOS);
    ids.extend(words.iter().take(max_len - 2).map(|w| vocab.id_or_unk(w)));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// A token sequence with keyword positions replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub masked_positions: Vec<usize>,
    pub masked_targets: Vec<usize>,
}

impl MaskedSequence {
    pub fn num_masks(&self) -> usize {
        self.masked_positions.len()
    }

    /// Writes the recorded targets back, recovering the original sequence.
    pub fn unmask(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for (&p, &t) in self.masked_positions.iter().zip(&self.masked_targets) {
            ids[p] = t;
        }
        ids
    }
}

/// Ids of the keywords that exist in `vocab`.
pub fn keyword_ids(keywords: &KeywordList, vocab: &Vocabulary) -> HashSet<usize> {
    keywords
        .keywords
        .iter()
        .filter_map(|k| vocab.id(k))
        .collect()
}

pub fn mask_keywords(tokens: &[usize], keyword_ids: &HashSet<usize>) -> MaskedSequence {
    let mut ids = tokens.to_vec();
    let mut masked_positions = Vec::new();
    let mut masked_targets = Vec::new();
    for (p, id) in ids.iter_mut().enumerate() {
        if !Vocabulary::is_special(*id) && keyword_ids.contains(id) {
            masked_positions.push(p);
            masked_targets.push(*id);
            *id = MASK;
        }
    }
    MaskedSequence {
        ids,
        masked_positions,
        masked_targets,
    }
}
