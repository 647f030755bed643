//! Immutable segment files.
//!
//! ```text
//! "LMSG" | version u8 (=1) | doc count u32 | payload length u64 | JSON array of docs | crc32 u32
//! ```
//!
//! Segment names start with a zero-padded nanosecond timestamp, so sorting
//! names orders segments by commit time. Later segments replace earlier
//! versions of the same document.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::IndexedDoc;
use crate::error::{Error, Result};
use crate::store::write_atomic;

const SEGMENT_MAGIC: &[u8; 4] = b"LMSG";
const SEGMENT_VERSION: u8 = 1;
pub const SEGMENT_EXT: &str = "seg";

pub fn encode_segment(docs: &[IndexedDoc]) -> Vec<u8> {
    let payload = serde_json::to_vec(docs).expect("IndexedDoc serializes");
    let mut out = Vec::with_capacity(payload.len() + 21);
    out.extend_from_slice(SEGMENT_MAGIC);
    out.push(SEGMENT_VERSION);
    out.extend_from_slice(&(docs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_segment(bytes: &[u8]) -> Result<Vec<IndexedDoc>> {
    if bytes.len() < 21 {
        return Err(Error::Integrity(format!("segment truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != SEGMENT_MAGIC {
        return Err(Error::Integrity("not a segment file".into()));
    }
    if bytes[4] != SEGMENT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 17 + len + 4 {
        return Err(Error::Integrity(format!(
            "segment length {} does not match declared payload {len}",
            bytes.len()
        )));
    }
    let body = &bytes[..17 + len];
    let crc = u32::from_le_bytes(bytes[17 + len..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(Error::Integrity("segment crc32 mismatch".into()));
    }
    let docs: Vec<IndexedDoc> =
        serde_json::from_slice(&bytes[17..17 + len]).map_err(|e| Error::Integrity(format!("segment payload: {e}")))?;
    if docs.len() != count {
        return Err(Error::Integrity(format!(
            "segment declares {count} docs, holds {}",
            docs.len()
        )));
    }
    Ok(docs)
}

pub fn segment_name() -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!("{nanos:024}-{}.{SEGMENT_EXT}", uuid::Uuid::new_v4().simple())
}

pub fn write_segment(dir: &Path, docs: &[IndexedDoc]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(segment_name());
    write_atomic(&path, &encode_segment(docs))?;
    Ok(path)
}

/// Committed segment names in commit order.
pub fn list_segments(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for entry in entries {
                let name = entry?.file_name();
                if let Some(name) = name.to_str() {
                    if name.ends_with(&format!(".{SEGMENT_EXT}")) && !name.starts_with('.') {
                        names.push(name.to_owned());
                    }
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    names.sort();
    Ok(names)
}
