//! Keyword statistics and the keyword list file format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::text::normalize;
use crate::error::{Error, Result};

/// Thirty common English words with no retrieval value.
pub const DEFAULT_STOPLIST: [&str; 30] = [
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "are", "was", "there", "this", "that",
    "these", "it", "its", "and", "or", "with", "as", "by", "for", "from", "some", "many", "we",
    "can", "see", "here",
];

pub fn default_stoplist() -> HashSet<String> {
    DEFAULT_STOPLIST.iter().map(|s| s.to_string()).collect()
}

/// Reads a stoplist file: one word per line, `#` comments and blanks ignored.
pub fn load_stoplist(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .flat_map(normalize)
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    pub keywords: Vec<String>,
    /// Keywords each source contributed before deduplication, by source name.
    pub source_counts: BTreeMap<String, usize>,
    /// Source that first contributed each keyword, parallel to `keywords`.
    pub provenance: Vec<String>,
}

impl KeywordList {
    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.keywords.iter().any(|k| k == word)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (src, n) in &self.source_counts {
            out.push_str(&format!("# source {src} {n}\n"));
        }
        for (k, src) in self.keywords.iter().zip(&self.provenance) {
            out.push_str(&format!("# from {src}\n{k}\n"));
        }
        out
    }

    /// Inverse of [`to_file_string`](Self::to_file_string). Comment lines that
    /// are not recognized provenance records are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut list = KeywordList::default();
        let mut seen = HashSet::new();
        let mut pending_src: Option<String> = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let mut parts = comment.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("source"), Some(src), Some(n)) => {
                        let n = n
                            .parse()
                            .map_err(|_| Error::Format(format!("bad source count in {line:?}")))?;
                        list.source_counts.insert(src.to_string(), n);
                    }
                    (Some("from"), Some(src), None) => pending_src = Some(src.to_string()),
                    _ => {}
                }
                continue;
            }
            if !seen.insert(line.to_string()) {
                return Err(Error::Format(format!("duplicate keyword {line:?}")));
            }
            list.keywords.push(line.to_string());
            list.provenance
                .push(pending_src.take().unwrap_or_else(|| "file".to_string()));
        }
        Ok(list)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Top-`k` non-stoplist words of one caption set, by descending frequency
/// with ties broken lexicographically.
pub fn top_k_words<'a>(
    captions: impl IntoIterator<Item = &'a str>,
    k: usize,
    stoplist: &HashSet<String>,
) -> Result<Vec<String>> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for cap in captions {
        any = true;
        for w in normalize(cap) {
            if !stoplist.contains(&w) {
                *freq.entry(w).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::EmptyCorpus(0));
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(w, _)| w).collect())
}

/// Per-corpus top-`k` keywords merged in first-seen order.
///
/// `corpora` pairs a source name with its captions.
pub fn compute_keywords(
    corpora: &[(String, Vec<String>)],
    k: usize,
    stoplist: &HashSet<String>,
) -> Result<KeywordList> {
    if k == 0 {
        return Err(Error::Config("keyword count k must be at least 1".into()));
    }
    if corpora.is_empty() {
        return Err(Error::EmptyCorpus(0));
    }
    let mut list = KeywordList::default();
    let mut seen = HashSet::new();
    for (idx, (name, captions)) in corpora.iter().enumerate() {
        let top = top_k_words(captions.iter().map(String::as_str), k, stoplist)
            .map_err(|_| Error::EmptyCorpus(idx))?;
        list.source_counts.insert(name.clone(), top.len());
        for w in top {
            if seen.insert(w.clone()) {
                list.keywords.push(w);
                list.provenance.push(name.clone());
            }
        }
    }
    Ok(list)
}
