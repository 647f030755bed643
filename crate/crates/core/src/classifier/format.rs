//! Binary model file.
//!
//! All integers and floats are little-endian; values are written as f64
//! whatever the in-memory scalar.
//!
//! ```text
//! "LMML" | version u8 (=1)
//! feature_dims u32 | hash_seed u64 | eval_accuracy f64 | trained_at i64 (unix ms)
//! train_set_sha [u8; 40]
//! label count u32, then per label: byte length u32 + UTF-8 bytes
//! bias: f64 * C
//! CSR weights, one row per label: row_ptr u64 * (C + 1), cols u32 * nnz, values f64 * nnz
//! crc32 u32 over every preceding byte
//! ```

use chrono::{DateTime, Utc};

use super::{validate_labels, ModelArtifact, ModelMeta};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::store::is_sha1_hex;

pub const MODEL_MAGIC: &[u8; 4] = b"LMML";
pub const MODEL_VERSION: u8 = 1;

pub fn encode_model<T: Scalar>(model: &ModelArtifact<T>) -> Vec<u8> {
    let classes = model.num_classes();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&model.feature_dims.to_le_bytes());
    out.extend_from_slice(&model.hash_seed.to_le_bytes());
    out.extend_from_slice(&model.eval_accuracy.to_le_bytes());
    out.extend_from_slice(&model.trained_at.timestamp_millis().to_le_bytes());
    out.extend_from_slice(model.train_set_sha.as_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    for label in &model.labels {
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label.as_bytes());
    }
    for b in &model.bias {
        out.extend_from_slice(&b.as_f64().to_le_bytes());
    }

    let weights = model.raw_weights();
    let mut row_ptr = vec![0u64];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for c in 0..classes {
        for f in 0..model.feature_dims as usize {
            let w = weights[f * classes + c];
            if w != T::zero() {
                cols.push(f as u32);
                vals.push(w.as_f64());
            }
        }
        row_ptr.push(cols.len() as u64);
    }
    for p in row_ptr {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for c in cols {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.pos as u64;
        let v = f64::from_le_bytes(self.array(what)?);
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::format(at as u64, message)
    }
}

/// Decodes a model file. Any defect yields an error; no partial model is
/// ever returned.
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<ModelArtifact<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(r.err(0, "bad magic, not a model file"));
    }
    let version = r.take(1, "version")?[0];
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let feature_dims = r.u32("feature_dims")?;
    let hash_seed = r.u64("hash_seed")?;
    let at = r.pos;
    let eval_accuracy = r.f64("eval_accuracy")?;
    if !(0.0..=1.0).contains(&eval_accuracy) {
        return Err(r.err(at, "eval_accuracy outside [0, 1]"));
    }
    let at = r.pos;
    let trained_at = DateTime::<Utc>::from_timestamp_millis(i64::from_le_bytes(r.array("trained_at")?))
        .ok_or_else(|| r.err(at, "trained_at out of range"))?;
    let at = r.pos;
    let train_set_sha = std::str::from_utf8(r.take(40, "train_set_sha")?)
        .ok()
        .filter(|s| is_sha1_hex(s))
        .ok_or_else(|| r.err(at, "train_set_sha is not 40-hex"))?
        .to_owned();

    let at = r.pos;
    let classes = r.u32("label count")? as usize;
    if classes > 1 << 16 {
        return Err(r.err(at, format!("implausible label count {classes}")));
    }
    let mut labels = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = r.u32("label length")? as usize;
        let at = r.pos;
        let label = std::str::from_utf8(r.take(len, "label")?).map_err(|_| r.err(at, "label is not UTF-8"))?;
        labels.push(label.to_owned());
    }
    validate_labels(&labels).map_err(|e| r.err(at, e.to_string()))?;

    let mut bias = Vec::with_capacity(classes);
    for _ in 0..classes {
        bias.push(T::of(r.f64("bias")?));
    }

    let mut row_ptr = Vec::with_capacity(classes + 1);
    for _ in 0..=classes {
        let at = r.pos;
        let p = r.u64("row_ptr")?;
        if row_ptr.last().is_some_and(|&prev| p < prev) || (row_ptr.is_empty() && p != 0) {
            return Err(r.err(at, "row pointers are not monotone from 0"));
        }
        row_ptr.push(p);
    }
    let nnz = row_ptr[classes] as usize;
    if nnz > classes * feature_dims as usize {
        return Err(r.err(r.pos, "more weights than the matrix holds"));
    }
    let cols_at = r.pos;
    let cols = r.take(nnz * 4, "column indices")?;
    let mut weights = vec![T::zero(); feature_dims as usize * classes];
    let mut vals = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        vals.push(r.f64("weight")?);
    }
    for c in 0..classes {
        let (start, end) = (row_ptr[c] as usize, row_ptr[c + 1] as usize);
        let mut prev: Option<u32> = None;
        for k in start..end {
            let col = u32::from_le_bytes(cols[k * 4..k * 4 + 4].try_into().expect("4 bytes"));
            if col >= feature_dims || prev.is_some_and(|p| col <= p) {
                return Err(r.err(cols_at + k * 4, "column index out of order or range"));
            }
            prev = Some(col);
            weights[col as usize * classes + c] = T::of(vals[k]);
        }
    }

    let body_len = r.pos;
    let stored = r.u32("crc32")?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes after checksum"));
    }
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(r.err(body_len, "crc32 mismatch"));
    }

    Ok(ModelArtifact::from_parts(
        labels,
        weights,
        bias,
        ModelMeta {
            feature_dims,
            hash_seed,
            eval_accuracy,
            trained_at,
            train_set_sha,
        },
    ))
}
