//! Text cleaning and hashed bag-of-words features.

use std::collections::HashMap;
use std::fmt;

use xxhash_rust::xxh64::xxh64;

use crate::ingest::ArticleDoc;
use crate::num::Scalar;

/// Width of the hashed feature space.
pub const FEATURE_DIMS: u32 = 1 << 18;

/// Seed of the token hash. Changing it invalidates every saved model.
pub const HASH_SEED: u64 = 0x6c69_746d_696e_6521;

/// Lowercase ASCII alphanumeric tokens joined by single spaces.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CleanText(String);

impl CleanText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn clean_text(raw: &str) -> CleanText {
    let mut out = String::with_capacity(raw.len());
    let mut gap = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_lowercase() || c.is_ascii_digit() {
            if gap && !out.is_empty() {
                out.push(' ');
            }
            gap = false;
            out.push(c);
        } else {
            gap = true;
        }
    }
    CleanText(out)
}

/// Cleans possibly invalid UTF-8; bad sequences become separators.
pub fn clean_bytes(raw: &[u8]) -> CleanText {
    clean_text(&String::from_utf8_lossy(raw))
}

pub fn token_index(token: &str) -> u32 {
    (xxh64(token.as_bytes(), HASH_SEED) % u64::from(FEATURE_DIMS)) as u32
}

/// Sparse L2-normalized term-frequency vector over [`FEATURE_DIMS`] slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector<T> {
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> FeatureVector<T> {
    /// Builds a vector from raw entries, checking the sparse-vector invariants.
    pub fn from_entries(entries: Vec<(u32, T)>) -> Option<Self> {
        let sorted = entries.windows(2).all(|w| w[0].0 < w[1].0);
        let in_range = entries.iter().all(|&(i, v)| i < FEATURE_DIMS && v.is_finite());
        (sorted && in_range).then_some(FeatureVector { entries })
    }

    pub fn dims(&self) -> u32 {
        FEATURE_DIMS
    }

    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn squared_norm(&self) -> T {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.squared_norm().sqrt()
    }
}

pub fn featurize<T: Scalar>(doc: &ArticleDoc) -> FeatureVector<T> {
    let text = format!("{} {} {}", doc.title, doc.abstract_text, doc.body_text);
    featurize_text(&text)
}

pub fn featurize_text<T: Scalar>(text: &str) -> FeatureVector<T> {
    let clean = clean_text(text);
    let mut counts: HashMap<u32, u32> = HashMap::new();
    for token in clean.tokens() {
        *counts.entry(token_index(token)).or_default() += 1;
    }
    let mut entries: Vec<(u32, u32)> = counts.into_iter().collect();
    entries.sort_unstable_by_key(|&(i, _)| i);
    let norm = entries
        .iter()
        .map(|&(_, c)| f64::from(c) * f64::from(c))
        .sum::<f64>()
        .sqrt();
    FeatureVector {
        entries: entries
            .into_iter()
            .map(|(i, c)| (i, T::of(f64::from(c) / norm)))
            .collect(),
    }
}
