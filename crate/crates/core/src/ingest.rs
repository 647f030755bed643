//! Dataset update detection and incremental loading into the staging bucket.
//!
//! Article identity is the SHA1 of the source article file. A row is new when
//! its checksum is in neither the staging nor the completed bucket, so a re-run
//! over an unchanged dataset touches nothing.

use std::fs::{self, File, TryLockError};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{is_sha1_hex, sha1_key, BucketId, ObjectRef, Store};

/// Column names of the metadata CSV, in canonical order.
pub const METADATA_COLUMNS: [&str; 7] = [
    "record_id",
    "sha",
    "title",
    "abstract",
    "publish_time",
    "authors",
    "source",
];

pub const DEFAULT_SOURCE: &str = "cord19";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Author {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
}

/// One article as stored in the staging bucket.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArticleDoc {
    pub sha: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub body_text: String,
    pub authors: Vec<Author>,
    pub publish_time: Option<NaiveDate>,
    pub source: String,
}

impl ArticleDoc {
    pub fn validate(&self) -> Result<()> {
        if !is_sha1_hex(&self.sha) {
            return Err(Error::validation(format!("article sha {:?} is not 40-hex", self.sha)));
        }
        if self.title.trim().is_empty() && self.abstract_text.trim().is_empty() && self.body_text.trim().is_empty() {
            return Err(Error::validation(format!(
                "article {} has no title, abstract or body text",
                self.sha
            )));
        }
        Ok(())
    }

    pub fn staging_key(&self) -> String {
        format!("{}.json", self.sha)
    }

    /// Distinct author countries, sorted.
    pub fn countries(&self) -> Vec<String> {
        let mut out: Vec<String> = self.authors.iter().filter_map(|a| a.country.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("ArticleDoc serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<ArticleDoc> {
        let doc: ArticleDoc = serde_json::from_slice(bytes)?;
        doc.validate()?;
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetadataRow {
    pub record_id: String,
    pub sha: Option<String>,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub publish_time: Option<NaiveDate>,
    pub authors_raw: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowReject {
    /// Record id if known, otherwise `line <n>`.
    pub record: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedMetadata {
    pub rows: Vec<MetadataRow>,
    pub rejects: Vec<RowReject>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub seen: u64,
    pub new: u64,
    pub skipped_existing: u64,
    pub rejected: u64,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejects: Vec<RowReject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IngestReport {
    pub fn failed(error: &Error) -> IngestReport {
        IngestReport {
            error: Some(error.to_string()),
            ..IngestReport::default()
        }
    }
}

// CORD-19 style per-article JSON.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CordArticle {
    pub paper_id: String,
    pub metadata: CordMetadata,
    #[serde(rename = "abstract", default)]
    pub abstract_paragraphs: Vec<CordParagraph>,
    #[serde(default)]
    pub body_text: Vec<CordParagraph>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CordMetadata {
    pub title: String,
    #[serde(default)]
    pub authors: Vec<CordAuthor>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CordAuthor {
    #[serde(default)]
    pub first: String,
    #[serde(default)]
    pub last: String,
    #[serde(default)]
    pub affiliation: CordAffiliation,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CordAffiliation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CordParagraph {
    pub text: String,
}

impl CordArticle {
    pub fn parse(bytes: &[u8]) -> Result<CordArticle> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(format!("article schema violation at {path}: {}", e.inner()))
        })
    }
}

/// Trimmed, title-cased country name; empty strings become `None`.
pub fn normalize_country(raw: &str) -> Option<String> {
    let words: Vec<String> = raw
        .split_whitespace()
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
                None => String::new(),
            }
        })
        .collect();
    (!words.is_empty()).then(|| words.join(" "))
}

fn join_paragraphs(paragraphs: &[CordParagraph]) -> String {
    paragraphs
        .iter()
        .map(|p| p.text.trim())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Parses `Last, First; Last2, First2` into author names without countries.
pub fn parse_authors_raw(raw: &str) -> Vec<Author> {
    raw.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let name = match s.split_once(',') {
                Some((last, first)) => format!("{} {}", first.trim(), last.trim()),
                None => s.to_owned(),
            };
            Author {
                name: name.trim().to_owned(),
                country: None,
            }
        })
        .collect()
}

fn parse_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .or_else(|| raw.parse::<i32>().ok().and_then(|y| NaiveDate::from_ymd_opt(y, 1, 1)))
}

/// Parses the metadata CSV. Rows missing required values are returned as
/// rejects with a reason rather than dropped.
pub fn parse_metadata<R: Read>(reader: R) -> Result<ParsedMetadata> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse(format!("unreadable metadata header: {e}")))?
        .clone();
    let mut columns = [0usize; METADATA_COLUMNS.len()];
    for (slot, name) in columns.iter_mut().zip(METADATA_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::Parse(format!("metadata header is missing column {name:?}")))?;
    }
    let [c_id, c_sha, c_title, c_abstract, c_time, c_authors, c_source] = columns;

    let mut out = ParsedMetadata::default();
    for (i, record) in csv.records().enumerate() {
        let line = format!("line {}", i + 2);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RowReject {
                    record: line,
                    reason: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        if record.len() < headers.len() {
            out.rejects.push(RowReject {
                record: line,
                reason: format!("row has {} fields, header has {}", record.len(), headers.len()),
            });
            continue;
        }
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let record_id = field(c_id);
        if record_id.is_empty() {
            out.rejects.push(RowReject {
                record: line,
                reason: "empty record_id".into(),
            });
            continue;
        }
        // Multi-file entries list several checksums; the first is canonical.
        let sha = field(c_sha).split(';').next().unwrap_or("").trim().to_lowercase();
        if !sha.is_empty() && !is_sha1_hex(&sha) {
            out.rejects.push(RowReject {
                record: record_id.to_owned(),
                reason: format!("malformed sha {sha:?}"),
            });
            continue;
        }
        out.rows.push(MetadataRow {
            record_id: record_id.to_owned(),
            sha: (!sha.is_empty()).then_some(sha),
            title: field(c_title).to_owned(),
            abstract_text: field(c_abstract).to_owned(),
            publish_time: parse_date(field(c_time)),
            authors_raw: field(c_authors).to_owned(),
            source: field(c_source).to_owned(),
        });
    }
    Ok(out)
}

fn staged_or_completed(store: &Store, sha: &str) -> Result<bool> {
    let key = format!("{sha}.json");
    Ok(store.exists(BucketId::Staging, &key)? || store.exists(BucketId::Completed, &key)?)
}

/// Rows whose checksum is absent from both staging and completed. Rows
/// without a checksum are kept; they are hashed from their file at ingest.
pub fn diff_incremental(store: &Store, rows: &[MetadataRow]) -> Result<Vec<MetadataRow>> {
    let mut fresh = Vec::new();
    for row in rows {
        match &row.sha {
            Some(sha) if staged_or_completed(store, sha)? => {}
            _ => fresh.push(row.clone()),
        }
    }
    Ok(fresh)
}

/// Builds an article from its file bytes plus the metadata row describing it.
pub fn article_from_file(file: &[u8], row: &MetadataRow, default_source: &str) -> Result<ArticleDoc> {
    let sha = sha1_key(file);
    if let Some(expected) = &row.sha {
        if *expected != sha {
            return Err(Error::Integrity(format!(
                "record {}: metadata sha {expected} does not match file sha {sha}",
                row.record_id
            )));
        }
    }
    let cord = CordArticle::parse(file)?;
    let mut authors: Vec<Author> = cord
        .metadata
        .authors
        .iter()
        .map(|a| Author {
            name: format!("{} {}", a.first.trim(), a.last.trim()).trim().to_owned(),
            country: a.affiliation.country.as_deref().and_then(normalize_country),
        })
        .filter(|a| !a.name.is_empty() || a.country.is_some())
        .collect();
    if authors.is_empty() {
        authors = parse_authors_raw(&row.authors_raw);
    }
    let abstract_text = match join_paragraphs(&cord.abstract_paragraphs) {
        s if s.is_empty() => row.abstract_text.clone(),
        s => s,
    };
    let title = match cord.metadata.title.trim() {
        "" => row.title.clone(),
        t => t.to_owned(),
    };
    let doc = ArticleDoc {
        sha,
        title,
        abstract_text,
        body_text: join_paragraphs(&cord.body_text),
        authors,
        publish_time: row.publish_time,
        source: source_of(row, default_source),
    };
    doc.validate()?;
    Ok(doc)
}

/// Article for a metadata row that has no full-text file. Its identity is the
/// row's checksum, or the SHA1 of the row itself when the row has none.
pub fn article_from_row(row: &MetadataRow, default_source: &str) -> Result<ArticleDoc> {
    let sha = match &row.sha {
        Some(sha) => sha.clone(),
        None => sha1_key(&serde_json::to_vec(row).expect("MetadataRow serializes")),
    };
    let doc = ArticleDoc {
        sha,
        title: row.title.clone(),
        abstract_text: row.abstract_text.clone(),
        body_text: String::new(),
        authors: parse_authors_raw(&row.authors_raw),
        publish_time: row.publish_time,
        source: source_of(row, default_source),
    };
    doc.validate()?;
    Ok(doc)
}

fn source_of(row: &MetadataRow, default_source: &str) -> String {
    if row.source.is_empty() {
        default_source.to_owned()
    } else {
        row.source.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub object: ObjectRef,
    /// False when the article was already staged or completed.
    pub fresh: bool,
}

/// Stages a validated article unless it is already staged or completed.
pub fn stage_article(store: &Store, doc: &ArticleDoc) -> Result<Ingested> {
    doc.validate()?;
    let key = doc.staging_key();
    let object = ObjectRef::new(BucketId::Staging, key.clone());
    if staged_or_completed(store, &doc.sha)? {
        return Ok(Ingested { object, fresh: false });
    }
    store.put(BucketId::Staging, &key, &doc.to_json_bytes())?;
    Ok(Ingested { object, fresh: true })
}

pub fn ingest_article(store: &Store, file: &[u8], row: &MetadataRow) -> Result<Ingested> {
    let doc = article_from_file(file, row, DEFAULT_SOURCE)?;
    stage_article(store, &doc)
}

/// Parks a PDF in the raw bucket for a later extraction task.
pub fn enqueue_raw_pdf(store: &Store, bytes: &[u8]) -> Result<ObjectRef> {
    store.put_content(BucketId::Raw, "pdf", bytes)
}

/// Exclusive advisory lock held for the duration of one ingest run.
#[derive(Debug)]
pub struct IngestLock {
    _file: File,
}

impl IngestLock {
    pub fn acquire(store: &Store) -> Result<IngestLock> {
        let file = File::create(store.root().join(".ingest.lock"))?;
        match file.try_lock() {
            Ok(()) => Ok(IngestLock { _file: file }),
            Err(TryLockError::WouldBlock) => Err(Error::Conflict(
                "another ingest run holds the lock for this store".into(),
            )),
            Err(TryLockError::Error(e)) => Err(e.into()),
        }
    }
}

/// Where a dataset's metadata and article files live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSource {
    /// Local path or `http://` URL of the metadata CSV.
    pub metadata: String,
    pub articles: Option<PathBuf>,
    pub default_source: String,
}

impl DatasetSource {
    pub fn local(metadata: impl AsRef<Path>, articles: impl AsRef<Path>) -> DatasetSource {
        DatasetSource {
            metadata: metadata.as_ref().display().to_string(),
            articles: Some(articles.as_ref().to_path_buf()),
            default_source: DEFAULT_SOURCE.into(),
        }
    }

    fn read_metadata(&self) -> Result<Vec<u8>> {
        if self.metadata.starts_with("http://") || self.metadata.starts_with("https://") {
            let mut response = ureq::get(&self.metadata)
                .call()
                .map_err(|e| Error::Connection(format!("fetching {}: {e}", self.metadata)))?;
            return response
                .body_mut()
                .read_to_vec()
                .map_err(|e| Error::Connection(format!("reading {}: {e}", self.metadata)));
        }
        fs::read(&self.metadata).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                Error::not_found(format!("metadata file {}", self.metadata))
            } else {
                e.into()
            }
        })
    }

    fn article_file(&self, row: &MetadataRow) -> Result<Option<Vec<u8>>> {
        let Some(dir) = &self.articles else {
            return Ok(None);
        };
        let name = row.sha.as_deref().unwrap_or(&row.record_id);
        match fs::read(dir.join(format!("{name}.json"))) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// Parse, diff and stage one dataset snapshot.
pub fn ingest_dataset(store: &Store, source: &DatasetSource) -> Result<IngestReport> {
    let started = Instant::now();
    if let Some(dir) = &source.articles {
        if !dir.is_dir() {
            return Err(Error::not_found(format!("articles directory {}", dir.display())));
        }
    }
    let metadata = source.read_metadata()?;
    let _lock = IngestLock::acquire(store)?;
    let parsed = parse_metadata(metadata.as_slice())?;

    let mut report = IngestReport {
        seen: (parsed.rows.len() + parsed.rejects.len()) as u64,
        rejected: parsed.rejects.len() as u64,
        rejects: parsed.rejects,
        ..IngestReport::default()
    };
    let fresh = diff_incremental(store, &parsed.rows)?;
    report.skipped_existing = (parsed.rows.len() - fresh.len()) as u64;

    for row in &fresh {
        let doc = match source.article_file(row)? {
            Some(bytes) => article_from_file(&bytes, row, &source.default_source),
            None => article_from_row(row, &source.default_source),
        };
        let outcome = doc.and_then(|doc| stage_article(store, &doc));
        match outcome {
            Ok(Ingested { fresh: true, .. }) => report.new += 1,
            Ok(Ingested { fresh: false, .. }) => report.skipped_existing += 1,
            Err(e @ (Error::Io(_) | Error::Connection(_))) => return Err(e),
            Err(e) => {
                report.rejected += 1;
                report.rejects.push(RowReject {
                    record: row.record_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    report.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}
