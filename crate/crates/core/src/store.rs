//! Content-addressed bucket storage on the local filesystem.
//!
//! Layout is `<root>/<bucket>/<key>`, one file per object. The directory is
//! the source of truth, so several processes can share one store root the same
//! way several nodes share one object-storage endpoint. Writes land in a
//! temporary file first and are renamed into place, so readers never observe a
//! partially written object.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

/// Extensions permitted after the 40-hex checksum in an object key.
pub const KEY_EXTENSIONS: [&str; 4] = ["json", "xml", "pdf", "model"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketId {
    Raw,
    Staging,
    Completed,
    MlModels,
}

impl BucketId {
    pub const ALL: [BucketId; 4] = [
        BucketId::Raw,
        BucketId::Staging,
        BucketId::Completed,
        BucketId::MlModels,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BucketId::Raw => "raw",
            BucketId::Staging => "staging",
            BucketId::Completed => "completed",
            BucketId::MlModels => "ml_models",
        }
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BucketId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BucketId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown bucket {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectRef {
    pub bucket: BucketId,
    pub key: String,
}

impl ObjectRef {
    pub fn new(bucket: BucketId, key: impl Into<String>) -> Self {
        ObjectRef {
            bucket,
            key: key.into(),
        }
    }

    /// The 40-hex checksum portion of the key.
    pub fn checksum(&self) -> &str {
        key_checksum(&self.key)
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

impl FromStr for ObjectRef {
    type Err = Error;

    /// Parses `bucket/key`.
    fn from_str(s: &str) -> Result<Self> {
        let (bucket, key) = s
            .split_once('/')
            .ok_or_else(|| Error::validation(format!("object ref {s:?} is not bucket/key")))?;
        validate_key(key)?;
        Ok(ObjectRef::new(bucket.parse()?, key))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub object: ObjectRef,
    pub bytes: Vec<u8>,
    pub size: u64,
    pub stored_at: DateTime<Utc>,
}

/// Lowercase hex SHA1 of `content`.
pub fn sha1_key(content: &[u8]) -> String {
    hex::encode(Sha1::digest(content))
}

pub fn is_sha1_hex(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

pub fn key_checksum(key: &str) -> &str {
    key.split_once('.').map_or(key, |(hex, _)| hex)
}

/// Checks `<40-hex>[.<ext>]` with `ext` one of [`KEY_EXTENSIONS`].
pub fn validate_key(key: &str) -> Result<()> {
    let (hex, ext) = match key.split_once('.') {
        Some((hex, ext)) => (hex, Some(ext)),
        None => (key, None),
    };
    if !is_sha1_hex(hex) {
        return Err(Error::validation(format!(
            "malformed object key {key:?}: expected 40 lowercase hex characters"
        )));
    }
    if let Some(ext) = ext {
        if !KEY_EXTENSIONS.contains(&ext) {
            return Err(Error::validation(format!(
                "malformed object key {key:?}: extension must be one of {KEY_EXTENSIONS:?}"
            )));
        }
    }
    Ok(())
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
        return Err(Error::validation(format!("malformed pointer name {name:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Store {
    root: Arc<PathBuf>,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        for bucket in BucketId::ALL {
            fs::create_dir_all(root.join(bucket.as_str()))?;
        }
        Ok(Store { root: Arc::new(root) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bucket_dir(&self, bucket: BucketId) -> PathBuf {
        self.root.join(bucket.as_str())
    }

    fn object_path(&self, bucket: BucketId, key: &str) -> PathBuf {
        self.root.join(bucket.as_str()).join(key)
    }

    /// Stores `content` under `key`. Re-putting identical bytes is a no-op;
    /// different bytes under an existing key are rejected.
    pub fn put(&self, bucket: BucketId, key: &str, content: &[u8]) -> Result<ObjectRef> {
        validate_key(key)?;
        let path = self.object_path(bucket, key);
        match fs::read(&path) {
            Ok(existing) if existing == content => {}
            Ok(_) => {
                return Err(Error::Conflict(format!(
                    "{bucket}/{key} already holds different content"
                )))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => write_atomic(&path, content)?,
            Err(e) => return Err(e.into()),
        }
        Ok(ObjectRef::new(bucket, key))
    }

    /// Stores `content` under its own checksum with the given extension.
    pub fn put_content(&self, bucket: BucketId, ext: &str, content: &[u8]) -> Result<ObjectRef> {
        let key = format!("{}.{ext}", sha1_key(content));
        self.put(bucket, &key, content)
    }

    pub fn get(&self, object: &ObjectRef) -> Result<Vec<u8>> {
        validate_key(&object.key)?;
        fs::read(self.object_path(object.bucket, &object.key)).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                Error::not_found(object.to_string())
            } else {
                e.into()
            }
        })
    }

    pub fn get_object(&self, object: &ObjectRef) -> Result<StoredObject> {
        let bytes = self.get(object)?;
        let meta = fs::metadata(self.object_path(object.bucket, &object.key))?;
        let stored_at = meta.modified().map(DateTime::<Utc>::from)?;
        Ok(StoredObject {
            object: object.clone(),
            size: bytes.len() as u64,
            bytes,
            stored_at,
        })
    }

    /// Constant-time presence check: a single directory lookup, no scan.
    pub fn exists(&self, bucket: BucketId, key: &str) -> Result<bool> {
        validate_key(key)?;
        match fs::symlink_metadata(self.object_path(bucket, key)) {
            Ok(_) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Moves an object between buckets: copy to the destination, then delete
    /// the source. Repeating a completed move succeeds without changes.
    pub fn move_object(&self, src: &ObjectRef, dst_bucket: BucketId) -> Result<ObjectRef> {
        let dst = ObjectRef::new(dst_bucket, src.key.clone());
        if src.bucket == dst_bucket {
            return if self.exists(dst_bucket, &src.key)? {
                Ok(dst)
            } else {
                Err(Error::not_found(src.to_string()))
            };
        }
        match self.get(src) {
            Ok(bytes) => {
                self.put(dst_bucket, &src.key, &bytes)?;
                self.delete(src)?;
                self.remove_sidecar(src.bucket, &src.key)?;
                Ok(dst)
            }
            Err(Error::NotFound(_)) if self.exists(dst_bucket, &src.key)? => Ok(dst),
            Err(e) => Err(e),
        }
    }

    /// Removes an object; absent objects are not an error.
    pub fn delete(&self, object: &ObjectRef) -> Result<()> {
        validate_key(&object.key)?;
        match fs::remove_file(self.object_path(object.bucket, &object.key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// One page of keys in lexicographic order, strictly after `after`.
    pub fn list(&self, bucket: BucketId, limit: usize, after: Option<&str>) -> Result<Vec<String>> {
        if limit == 0 {
            return Err(Error::validation("list limit must be at least 1"));
        }
        let mut keys = self.list_all(bucket)?;
        let start = match after {
            Some(after) => keys.partition_point(|k| k.as_str() <= after),
            None => 0,
        };
        keys.truncate((start + limit).min(keys.len()));
        Ok(keys.split_off(start))
    }

    /// Every key in the bucket, sorted. Temporary files, pointers and sidecars
    /// are not objects and are skipped.
    pub fn list_all(&self, bucket: BucketId) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(self.bucket_dir(bucket))? {
            let entry = entry?;
            if let Some(name) = entry.file_name().to_str() {
                if validate_key(name).is_ok() {
                    keys.push(name.to_owned());
                }
            }
        }
        keys.sort_unstable();
        Ok(keys)
    }

    pub fn count(&self, bucket: BucketId) -> Result<usize> {
        Ok(self.list_all(bucket)?.len())
    }

    /// Points the named alias (e.g. `current`) at `key`.
    pub fn set_pointer(&self, bucket: BucketId, name: &str, key: &str) -> Result<()> {
        validate_name(name)?;
        validate_key(key)?;
        write_atomic(
            &self.bucket_dir(bucket).join(format!("{name}.ref")),
            format!("{key}\n").as_bytes(),
        )
    }

    pub fn pointer(&self, bucket: BucketId, name: &str) -> Result<Option<ObjectRef>> {
        validate_name(name)?;
        match fs::read_to_string(self.bucket_dir(bucket).join(format!("{name}.ref"))) {
            Ok(s) => {
                let key = s.trim();
                validate_key(key).map_err(|_| Error::Integrity(format!("pointer {bucket}/{name} holds {key:?}")))?;
                Ok(Some(ObjectRef::new(bucket, key)))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Attaches a human-readable note (e.g. a processing failure reason) to an object.
    pub fn put_sidecar(&self, bucket: BucketId, key: &str, note: &str) -> Result<()> {
        validate_key(key)?;
        write_atomic(&self.sidecar_path(bucket, key), note.as_bytes())
    }

    pub fn sidecar(&self, bucket: BucketId, key: &str) -> Result<Option<String>> {
        validate_key(key)?;
        match fs::read_to_string(self.sidecar_path(bucket, key)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn remove_sidecar(&self, bucket: BucketId, key: &str) -> Result<()> {
        match fs::remove_file(self.sidecar_path(bucket, key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn sidecar_path(&self, bucket: BucketId, key: &str) -> PathBuf {
        self.bucket_dir(bucket).join(format!("{key}.reason"))
    }
}

/// Writes through a temporary sibling, fsyncs, then renames into place.
pub(crate) fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::validation(format!("{} has no parent", path.display())))?;
    let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
    let result = (|| -> io::Result<()> {
        let mut file = File::create(&tmp)?;
        file.write_all(content)?;
        file.sync_data()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn sha1_test_vectors() {
        assert_eq!(sha1_key(b""), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
        assert_eq!(sha1_key(b"abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
        assert_eq!(sha1_key(b"abc"), sha1_key(b"abc"));
    }

    #[test]
    fn bucket_names_are_fixed() {
        let names: Vec<_> = BucketId::ALL.iter().map(|b| b.as_str()).collect();
        assert_eq!(names, ["raw", "staging", "completed", "ml_models"]);
        assert!("Staging".parse::<BucketId>().is_err());
        assert_eq!("ml_models".parse::<BucketId>().unwrap(), BucketId::MlModels);
    }

    #[test]
    fn key_validation() {
        let hex = sha1_key(b"x");
        assert!(validate_key(&hex).is_ok());
        assert!(validate_key(&format!("{hex}.json")).is_ok());
        assert!(validate_key(&format!("{hex}.exe")).is_err());
        assert!(validate_key(&hex.to_uppercase()).is_err());
        assert!(validate_key("XYZ").is_err());
    }

    #[test]
    fn put_get_round_trip_and_idempotence() {
        let (_dir, store) = store();
        let body = b"{\"a\":1}";
        let key = format!("{}.json", sha1_key(body));
        let r1 = store.put(BucketId::Staging, &key, body).unwrap();
        let r2 = store.put(BucketId::Staging, &key, body).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(store.get(&r1).unwrap(), body);
        assert_eq!(store.count(BucketId::Staging).unwrap(), 1);
        let obj = store.get_object(&r1).unwrap();
        assert_eq!(obj.size, body.len() as u64);
    }

    #[test]
    fn put_rejects_malformed_key_and_conflicting_content() {
        let (_dir, store) = store();
        assert!(matches!(
            store.put(BucketId::Staging, "XYZ", b"b"),
            Err(Error::Validation(_))
        ));
        let key = sha1_key(b"one");
        store.put(BucketId::Raw, &key, b"one").unwrap();
        assert!(matches!(
            store.put(BucketId::Raw, &key, b"two"),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn exists_reflects_puts() {
        let (_dir, store) = store();
        let key = sha1_key(b"k");
        assert!(!store.exists(BucketId::Raw, &key).unwrap());
        store.put(BucketId::Raw, &key, b"k").unwrap();
        assert!(store.exists(BucketId::Raw, &key).unwrap());
        assert!(!store.exists(BucketId::Staging, &key).unwrap());
    }

    #[test]
    fn move_is_idempotent() {
        let (_dir, store) = store();
        let src = store.put_content(BucketId::Staging, "json", b"doc").unwrap();
        store.put_sidecar(BucketId::Staging, &src.key, "parse: bad").unwrap();
        let dst = store.move_object(&src, BucketId::Completed).unwrap();
        assert!(store.exists(BucketId::Completed, &dst.key).unwrap());
        assert!(!store.exists(BucketId::Staging, &src.key).unwrap());
        assert_eq!(store.sidecar(BucketId::Staging, &src.key).unwrap(), None);
        assert_eq!(store.move_object(&src, BucketId::Completed).unwrap(), dst);
        assert_eq!(store.count(BucketId::Completed).unwrap(), 1);
    }

    #[test]
    fn move_of_unknown_key_is_not_found() {
        let (_dir, store) = store();
        let src = ObjectRef::new(BucketId::Staging, sha1_key(b"nope"));
        assert!(matches!(
            store.move_object(&src, BucketId::Completed),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn list_paginates() {
        let (_dir, store) = store();
        assert!(store.list(BucketId::Raw, 10, None).unwrap().is_empty());
        let mut keys: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|s| store.put_content(BucketId::Raw, "pdf", s.as_bytes()).unwrap().key)
            .collect();
        keys.sort();
        assert_eq!(store.list(BucketId::Raw, 10, None).unwrap(), keys);
        let first = store.list(BucketId::Raw, 2, None).unwrap();
        assert_eq!(first, keys[..2]);
        let rest = store.list(BucketId::Raw, 2, Some(&first[1])).unwrap();
        assert_eq!(rest, keys[2..]);
        assert!(store.list(BucketId::Raw, 0, None).is_err());
    }

    #[test]
    fn pointers_and_sidecars_are_not_listed() {
        let (_dir, store) = store();
        let obj = store.put_content(BucketId::MlModels, "model", b"m").unwrap();
        store.set_pointer(BucketId::MlModels, "current", &obj.key).unwrap();
        store.put_sidecar(BucketId::MlModels, &obj.key, "note").unwrap();
        assert_eq!(store.list_all(BucketId::MlModels).unwrap(), vec![obj.key.clone()]);
        assert_eq!(store.pointer(BucketId::MlModels, "current").unwrap(), Some(obj));
        assert_eq!(store.pointer(BucketId::MlModels, "other").unwrap(), None);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Put(u8),
        Move(u8, BucketId),
    }

    fn op() -> impl Strategy<Value = Op> {
        let bucket = prop::sample::select(BucketId::ALL.to_vec());
        prop_oneof![
            (0u8..6).prop_map(Op::Put),
            ((0u8..6), bucket).prop_map(|(i, b)| Op::Move(i, b)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Each logical object lives in exactly one bucket regardless of how
        // puts and moves interleave.
        #[test]
        fn moves_conserve_objects(ops in prop::collection::vec(op(), 1..40)) {
            let (_dir, store) = store();
            let mut model: std::collections::BTreeMap<u8, BucketId> = Default::default();
            for op in ops {
                match op {
                    Op::Put(i) => {
                        if let std::collections::btree_map::Entry::Vacant(e) = model.entry(i) {
                            store.put_content(BucketId::Staging, "json", &[i]).unwrap();
                            e.insert(BucketId::Staging);
                        }
                    }
                    Op::Move(i, dst) => {
                        if let Some(at) = model.get_mut(&i) {
                            let src = ObjectRef::new(*at, format!("{}.json", sha1_key(&[i])));
                            store.move_object(&src, dst).unwrap();
                            *at = dst;
                        }
                    }
                }
            }
            let total: usize = BucketId::ALL.iter().map(|b| store.count(*b).unwrap()).sum();
            prop_assert_eq!(total, model.len());
            for (i, bucket) in model {
                let key = format!("{}.json", sha1_key(&[i]));
                prop_assert!(store.exists(bucket, &key).unwrap());
            }
        }
    }
}
