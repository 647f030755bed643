//! Embedded full-text index with keyword facets.
//!
//! Documents are persisted as append-only segment files; postings live in
//! memory and are rebuilt from the visible documents whenever a refresh picks
//! up new segments. Re-indexing a document id replaces the previous version.

pub mod segment;
pub mod snapshot;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::clean_text;
use crate::ingest::ArticleDoc;
use crate::store::is_sha1_hex;

/// BM25 term-frequency saturation.
pub const BM25_K1: f64 = 1.2;
/// BM25 length normalization.
pub const BM25_B: f64 = 0.75;
pub const TITLE_BOOST: f64 = 2.0;

const SNIPPET_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexedDoc {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub body_text: String,
    pub category: String,
    pub countries: BTreeSet<String>,
    pub source: String,
    pub publish_time: Option<NaiveDate>,
}

impl IndexedDoc {
    pub fn from_article(doc: &ArticleDoc, category: &str) -> IndexedDoc {
        IndexedDoc {
            doc_id: doc.sha.clone(),
            title: doc.title.clone(),
            abstract_text: doc.abstract_text.clone(),
            body_text: doc.body_text.clone(),
            category: category.to_owned(),
            countries: doc.countries().into_iter().collect(),
            source: doc.source.clone(),
            publish_time: doc.publish_time,
        }
    }

    fn validate(&self) -> Result<()> {
        if !is_sha1_hex(&self.doc_id) {
            return Err(Error::validation(format!(
                "doc_id {:?} is not a 40-hex sha",
                self.doc_id
            )));
        }
        Ok(())
    }

    fn field_text(&self, field: usize) -> &str {
        match field {
            0 => &self.title,
            1 => &self.abstract_text,
            _ => &self.body_text,
        }
    }
}

const FIELDS: usize = 3;
const FIELD_BOOST: [f64; FIELDS] = [TITLE_BOOST, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub title: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggField {
    Category,
    Countries,
    Source,
}

impl AggField {
    pub fn as_str(self) -> &'static str {
        match self {
            AggField::Category => "category",
            AggField::Countries => "countries",
            AggField::Source => "source",
        }
    }
}

impl fmt::Display for AggField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(AggField::Category),
            "countries" => Ok(AggField::Countries),
            "source" => Ok(AggField::Source),
            _ => Err(Error::validation(format!(
                "cannot aggregate on {s:?}; use category, countries or source"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggBucket {
    pub key: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub field: AggField,
    pub buckets: Vec<AggBucket>,
}

impl AggregationResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},count\n", self.field);
        for b in &self.buckets {
            let key = if b.key.contains([',', '"', '\n']) {
                format!("\"{}\"", b.key.replace('"', "\"\""))
            } else {
                b.key.clone()
            };
            out.push_str(&format!("{key},{}\n", b.count));
        }
        out
    }
}

#[derive(Debug, Default)]
struct TermPostings {
    /// Documents containing the term in each field.
    df: [u32; FIELDS],
    postings: Vec<(u32, [u32; FIELDS])>,
}

#[derive(Debug, Default)]
struct Inverted {
    ids: Vec<String>,
    lens: Vec<[u32; FIELDS]>,
    avg_len: [f64; FIELDS],
    terms: HashMap<String, TermPostings>,
}

impl Inverted {
    fn build(docs: &BTreeMap<String, IndexedDoc>) -> Inverted {
        let mut inv = Inverted::default();
        let mut totals = [0u64; FIELDS];
        for (ordinal, doc) in docs.values().enumerate() {
            let mut tf: HashMap<String, [u32; FIELDS]> = HashMap::new();
            let mut lens = [0u32; FIELDS];
            for (field, len) in lens.iter_mut().enumerate() {
                let clean = clean_text(doc.field_text(field));
                for token in clean.tokens() {
                    tf.entry(token.to_owned()).or_default()[field] += 1;
                    *len += 1;
                }
                totals[field] += u64::from(*len);
            }
            for (term, counts) in tf {
                let entry = inv.terms.entry(term).or_default();
                for (df, &c) in entry.df.iter_mut().zip(&counts) {
                    *df += u32::from(c > 0);
                }
                entry.postings.push((ordinal as u32, counts));
            }
            inv.ids.push(doc.doc_id.clone());
            inv.lens.push(lens);
        }
        let n = inv.ids.len().max(1) as f64;
        for (avg, total) in inv.avg_len.iter_mut().zip(totals) {
            *avg = total as f64 / n;
        }
        inv
    }
}

/// In-process view of the index plus its write buffer.
#[derive(Debug, Default)]
pub struct Index {
    dir: Option<PathBuf>,
    docs: BTreeMap<String, IndexedDoc>,
    loaded: BTreeSet<String>,
    pending: Vec<IndexedDoc>,
    inverted: Inverted,
}

impl Index {
    /// An index with no backing directory.
    pub fn in_memory() -> Index {
        Index::default()
    }

    /// Opens the index at `dir`, loading every committed segment.
    pub fn open(dir: impl AsRef<Path>) -> Result<Index> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut index = Index {
            dir: Some(dir),
            ..Index::default()
        };
        index.refresh()?;
        Ok(index)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Buffers a document; it becomes searchable after the next [`refresh`](Self::refresh).
    pub fn index_doc(&mut self, doc: IndexedDoc) -> Result<()> {
        doc.validate()?;
        self.pending.push(doc);
        Ok(())
    }

    /// Commits buffered documents and picks up segments committed by other
    /// writers.
    pub fn refresh(&mut self) -> Result<()> {
        let mut changed = false;
        match &self.dir {
            Some(dir) => {
                if !self.pending.is_empty() {
                    segment::write_segment(dir, &self.pending)?;
                    self.pending.clear();
                }
                for name in segment::list_segments(dir)? {
                    if self.loaded.contains(&name) {
                        continue;
                    }
                    let docs = segment::decode_segment(&fs::read(dir.join(&name))?)?;
                    for doc in docs {
                        self.docs.insert(doc.doc_id.clone(), doc);
                    }
                    self.loaded.insert(name);
                    changed = true;
                }
            }
            None => {
                changed = !self.pending.is_empty();
                for doc in self.pending.drain(..) {
                    self.docs.insert(doc.doc_id.clone(), doc);
                }
            }
        }
        if changed {
            self.inverted = Inverted::build(&self.docs);
        }
        Ok(())
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn get(&self, doc_id: &str) -> Option<&IndexedDoc> {
        self.docs.get(doc_id)
    }

    pub fn docs(&self) -> impl Iterator<Item = &IndexedDoc> {
        self.docs.values()
    }

    /// `doc_id -> category` for every visible document.
    pub fn labels(&self) -> BTreeMap<String, String> {
        self.docs
            .iter()
            .map(|(id, d)| (id.clone(), d.category.clone()))
            .collect()
    }

    /// BM25 disjunction over title, abstract and body. Each distinct query
    /// token contributes, per field, `boost * idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg_len))`
    /// with `idf = ln(1 + (N - df + 0.5) / (df + 0.5))` from that field's
    /// document frequency.
    pub fn search(&self, query: &str, limit: usize) -> Result<Vec<SearchHit>> {
        if limit == 0 {
            return Err(Error::validation("search limit must be at least 1"));
        }
        let inv = &self.inverted;
        let n = inv.ids.len() as f64;
        let clean = clean_text(query);
        let terms: BTreeSet<&str> = clean.tokens().collect();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in terms {
            let Some(tp) = inv.terms.get(term) else { continue };
            let idf: Vec<f64> = tp
                .df
                .iter()
                .map(|&df| (1.0 + (n - f64::from(df) + 0.5) / (f64::from(df) + 0.5)).ln())
                .collect();
            for &(doc, tf) in &tp.postings {
                let lens = inv.lens[doc as usize];
                let mut s = 0.0;
                for f in 0..FIELDS {
                    if tf[f] == 0 {
                        continue;
                    }
                    let tf = f64::from(tf[f]);
                    let norm = 1.0 - BM25_B + BM25_B * f64::from(lens[f]) / inv.avg_len[f];
                    s += FIELD_BOOST[f] * idf[f] * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
                }
                *scores.entry(doc).or_default() += s;
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| inv.ids[a.0 as usize].cmp(&inv.ids[b.0 as usize]))
        });
        hits.truncate(limit);
        Ok(hits
            .into_iter()
            .map(|(doc, score)| {
                let id = &inv.ids[doc as usize];
                SearchHit {
                    doc_id: id.clone(),
                    score,
                    title: snippet(&self.docs[id].title),
                }
            })
            .collect())
    }

    /// Exact terms aggregation, buckets sorted by count then key.
    pub fn aggregate(&self, field: AggField, top_k: usize) -> AggregationResult {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in self.docs.values() {
            match field {
                AggField::Category => *counts.entry(&doc.category).or_default() += 1,
                AggField::Source => *counts.entry(&doc.source).or_default() += 1,
                AggField::Countries => {
                    for c in &doc.countries {
                        *counts.entry(c).or_default() += 1;
                    }
                }
            }
        }
        let mut buckets: Vec<AggBucket> = counts
            .into_iter()
            .map(|(key, count)| AggBucket {
                key: key.to_owned(),
                count,
            })
            .collect();
        buckets.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
        buckets.truncate(top_k);
        AggregationResult { field, buckets }
    }

    /// Drops every document and, for a persistent index, its segment files.
    pub fn clear(&mut self) -> Result<()> {
        if let Some(dir) = &self.dir {
            for name in segment::list_segments(dir)? {
                fs::remove_file(dir.join(name))?;
            }
        }
        self.docs.clear();
        self.loaded.clear();
        self.pending.clear();
        self.inverted = Inverted::default();
        Ok(())
    }

    /// Writes the visible documents to a snapshot archive at `dst`.
    pub fn snapshot(&self, dst: impl AsRef<Path>) -> Result<snapshot::SnapshotManifest> {
        if !self.pending.is_empty() {
            return Err(Error::validation(
                "index has uncommitted documents; refresh before snapshot",
            ));
        }
        let docs: Vec<IndexedDoc> = self.docs.values().cloned().collect();
        snapshot::write_snapshot(dst.as_ref(), &docs)
    }

    /// Replaces the index contents with a snapshot. The snapshot is fully
    /// verified before anything is touched; a non-empty index is only
    /// overwritten with `force`.
    pub fn restore(&mut self, src: impl AsRef<Path>, force: bool) -> Result<()> {
        let docs = snapshot::read_snapshot(src.as_ref())?;
        if !force && (self.doc_count() > 0 || !self.pending.is_empty()) {
            return Err(Error::Conflict(
                "index is not empty; pass --force to overwrite it".into(),
            ));
        }
        self.clear()?;
        match &self.dir {
            Some(dir) => {
                segment::write_segment(dir, &docs)?;
            }
            None => self.pending = docs,
        }
        self.refresh()
    }
}

fn snippet(title: &str) -> String {
    match title.char_indices().nth(SNIPPET_CHARS) {
        Some((cut, _)) => format!("{}…", &title[..cut]),
        None => title.to_owned(),
    }
}

/// Buffers documents and commits them as one segment. Workers use this to
/// write without loading the index.
#[derive(Debug)]
pub struct IndexWriter {
    dir: PathBuf,
    pending: Vec<IndexedDoc>,
}

impl IndexWriter {
    pub fn new(dir: impl AsRef<Path>) -> IndexWriter {
        IndexWriter {
            dir: dir.as_ref().to_path_buf(),
            pending: Vec::new(),
        }
    }

    pub fn add(&mut self, doc: IndexedDoc) -> Result<()> {
        doc.validate()?;
        self.pending.push(doc);
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Durably writes the buffered documents as one segment.
    pub fn commit(&mut self) -> Result<Option<PathBuf>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let path = segment::write_segment(&self.dir, &self.pending)?;
        self.pending.clear();
        Ok(Some(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::sha1_key;
    use proptest::prelude::*;

    fn doc(id: &str, title: &str, body: &str) -> IndexedDoc {
        IndexedDoc {
            doc_id: sha1_key(id.as_bytes()),
            title: title.into(),
            body_text: body.into(),
            category: "other".into(),
            source: "test".into(),
            ..IndexedDoc::default()
        }
    }

    fn memory(docs: Vec<IndexedDoc>) -> Index {
        let mut idx = Index::in_memory();
        for d in docs {
            idx.index_doc(d).unwrap();
        }
        idx.refresh().unwrap();
        idx
    }

    #[test]
    fn unique_title_token_finds_one_doc() {
        let idx = memory(vec![doc("1", "vaccine trial", ""), doc("2", "risk factors", "")]);
        let hits = idx.search("vaccine", 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, sha1_key(b"1"));
        assert!(idx.search("zebra", 10).unwrap().is_empty());
        assert!(idx.search("!!!", 10).unwrap().is_empty());
        assert!(idx.search("vaccine", 0).is_err());
    }

    #[test]
    fn shared_tokens_return_both() {
        let idx = memory(vec![doc("1", "mask study", ""), doc("2", "", "a mask")]);
        let hits = idx.search("mask", 10).unwrap();
        assert_eq!(hits.len(), 2);
        // title boost puts the title match first
        assert_eq!(hits[0].doc_id, sha1_key(b"1"));
    }

    #[test]
    fn reindexing_replaces() {
        let mut idx = memory(vec![doc("1", "old title", "")]);
        idx.index_doc(doc("1", "new title", "")).unwrap();
        idx.refresh().unwrap();
        assert_eq!(idx.doc_count(), 1);
        assert!(idx.search("old", 5).unwrap().is_empty());
        assert_eq!(idx.search("new", 5).unwrap().len(), 1);
    }

    #[test]
    fn docs_are_visible_only_after_refresh() {
        let mut idx = Index::in_memory();
        idx.index_doc(doc("1", "vaccine", "")).unwrap();
        assert_eq!(idx.doc_count(), 0);
        idx.refresh().unwrap();
        assert_eq!(idx.doc_count(), 1);
    }

    #[test]
    fn malformed_ids_are_refused() {
        let mut idx = Index::in_memory();
        let mut d = doc("1", "t", "");
        d.doc_id = "nope".into();
        assert!(idx.index_doc(d).is_err());
    }

    #[test]
    fn aggregates_countries() {
        let mut docs = Vec::new();
        for (i, c) in ["AU", "AU", "US"].iter().enumerate() {
            let mut d = doc(&i.to_string(), "t", "");
            d.countries.insert(c.to_string());
            docs.push(d);
        }
        let idx = memory(docs);
        let agg = idx.aggregate(AggField::Countries, 10);
        let pairs: Vec<_> = agg.buckets.iter().map(|b| (b.key.as_str(), b.count)).collect();
        assert_eq!(pairs, [("AU", 2), ("US", 1)]);
        assert_eq!(agg.to_csv(), "countries,count\nAU,2\nUS,1\n");
        assert!(Index::in_memory().aggregate(AggField::Category, 5).buckets.is_empty());
        assert_eq!(idx.aggregate(AggField::Countries, 1).buckets.len(), 1);
        assert!("title".parse::<AggField>().is_err());
    }

    #[test]
    fn persistent_index_sees_other_writers() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        let mut writer = IndexWriter::new(dir.path());
        writer.add(doc("1", "alpha", "")).unwrap();
        writer.add(doc("2", "beta", "")).unwrap();
        writer.commit().unwrap();
        assert_eq!(idx.doc_count(), 0);
        idx.refresh().unwrap();
        assert_eq!(idx.doc_count(), 2);
        assert_eq!(Index::open(dir.path()).unwrap().doc_count(), 2);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = Index::open(dir.path().join("idx")).unwrap();
        for i in 0..20 {
            let mut d = doc(&i.to_string(), &format!("title {i}"), "shared words here");
            d.category = format!("c{}", i % 3);
            idx.index_doc(d).unwrap();
        }
        idx.refresh().unwrap();
        let snap = dir.path().join("snap.tar");
        idx.snapshot(&snap).unwrap();
        let before = (
            idx.search("title shared", 50).unwrap(),
            idx.aggregate(AggField::Category, 10),
        );

        assert!(matches!(idx.restore(&snap, false), Err(Error::Conflict(_))));
        idx.clear().unwrap();
        assert_eq!(Index::open(dir.path().join("idx")).unwrap().doc_count(), 0);
        idx.restore(&snap, false).unwrap();
        let after = (
            idx.search("title shared", 50).unwrap(),
            idx.aggregate(AggField::Category, 10),
        );
        assert_eq!(before, after);
        let reopened = Index::open(dir.path().join("idx")).unwrap();
        assert_eq!(reopened.doc_count(), 20);
    }

    #[test]
    fn corrupt_snapshot_leaves_index_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = memory(vec![doc("1", "keep me", "")]);
        let snap = dir.path().join("snap.tar");
        memory(vec![doc("2", "other", "")]).snapshot(&snap).unwrap();
        let bytes = fs::read(&snap).unwrap();
        fs::write(&snap, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(idx.restore(&snap, true), Err(Error::Integrity(_))));
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.search("keep", 1).unwrap().len(), 1);
    }

    #[test]
    fn snippets_are_bounded() {
        let long = "x".repeat(500);
        assert_eq!(snippet(&long).chars().count(), SNIPPET_CHARS + 1);
        assert_eq!(snippet("short"), "short");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn doc_count_is_distinct_ids(ids in prop::collection::vec(0u8..20, 0..60)) {
            let mut idx = Index::in_memory();
            for (step, id) in ids.iter().enumerate() {
                idx.index_doc(doc(&id.to_string(), &format!("v{step}"), "")).unwrap();
                if step % 7 == 0 {
                    idx.refresh().unwrap();
                }
            }
            idx.refresh().unwrap();
            let distinct: BTreeSet<_> = ids.iter().collect();
            prop_assert_eq!(idx.doc_count(), distinct.len());
        }

        // Every hit contains a query token; every doc containing one is hit.
        #[test]
        fn search_is_sound_and_complete(
            bodies in prop::collection::vec(prop::collection::vec("[a-e]", 0..8), 1..15),
            query in prop::collection::vec("[a-g]", 1..3),
        ) {
            let docs: Vec<_> = bodies
                .iter()
                .enumerate()
                .map(|(i, words)| doc(&i.to_string(), "", &words.join(" ")))
                .collect();
            let idx = memory(docs.clone());
            let hits = idx.search(&query.join(" "), 1000).unwrap();
            let hit_ids: BTreeSet<_> = hits.iter().map(|h| h.doc_id.clone()).collect();
            for (d, words) in docs.iter().zip(&bodies) {
                let matches = words.iter().any(|w| query.contains(w));
                prop_assert_eq!(hit_ids.contains(&d.doc_id), matches);
            }
            for w in hits.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id));
            }
        }
    }
}
