//! Snapshot archives: a tar stream holding `manifest.json` and one compacted
//! segment, followed by a little-endian CRC32 of the tar bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::segment::{decode_segment, encode_segment};
use super::IndexedDoc;
use crate::error::{Error, Result};
use crate::store::write_atomic;

pub const SNAPSHOT_FORMAT: &str = "litmine-index-snapshot";
const SEGMENT_ENTRY: &str = "segments/000000.seg";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub format: String,
    pub version: u32,
    pub doc_count: u64,
    pub created_at: DateTime<Utc>,
    pub segments: Vec<String>,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, path, data)?;
    Ok(())
}

pub fn write_snapshot(dst: &Path, docs: &[IndexedDoc]) -> Result<SnapshotManifest> {
    let manifest = SnapshotManifest {
        format: SNAPSHOT_FORMAT.into(),
        version: 1,
        doc_count: docs.len() as u64,
        created_at: Utc::now(),
        segments: vec![SEGMENT_ENTRY.into()],
    };
    let mut builder = tar::Builder::new(Vec::new());
    append(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    append(&mut builder, SEGMENT_ENTRY, &encode_segment(docs))?;
    let mut bytes = builder.into_inner()?;
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(dst, &bytes)?;
    Ok(manifest)
}

/// Reads and fully verifies a snapshot, returning its documents.
pub fn read_snapshot(src: &Path) -> Result<Vec<IndexedDoc>> {
    let bytes = fs::read(src)?;
    if bytes.len() < 4 {
        return Err(Error::Integrity("snapshot is truncated".into()));
    }
    let (archive, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(archive) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Integrity("snapshot crc32 mismatch".into()));
    }

    let mut manifest: Option<SnapshotManifest> = None;
    let mut segments: Vec<(String, Vec<u8>)> = Vec::new();
    let mut tar = tar::Archive::new(archive);
    let entries = tar
        .entries()
        .map_err(|e| Error::Integrity(format!("snapshot archive: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Integrity(format!("snapshot archive: {e}")))?;
        let path = entry
            .path()
            .map_err(|e| Error::Integrity(format!("snapshot entry path: {e}")))?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| Error::Integrity(format!("snapshot entry {path}: {e}")))?;
        if path == "manifest.json" {
            manifest =
                Some(serde_json::from_slice(&data).map_err(|e| Error::Integrity(format!("snapshot manifest: {e}")))?);
        } else {
            segments.push((path, data));
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Integrity("snapshot has no manifest".into()))?;
    if manifest.format != SNAPSHOT_FORMAT {
        return Err(Error::Integrity(format!(
            "unknown snapshot format {:?}",
            manifest.format
        )));
    }
    if manifest.version != 1 {
        return Err(Error::UnsupportedVersion(manifest.version.min(255) as u8));
    }

    let mut docs = Vec::new();
    for name in &manifest.segments {
        let (_, data) = segments
            .iter()
            .find(|(p, _)| p == name)
            .ok_or_else(|| Error::Integrity(format!("snapshot is missing segment {name}")))?;
        docs.extend(decode_segment(data)?);
    }
    if docs.len() as u64 != manifest.doc_count {
        return Err(Error::Integrity(format!(
            "manifest declares {} docs, segments hold {}",
            manifest.doc_count,
            docs.len()
        )));
    }
    Ok(docs)
}
