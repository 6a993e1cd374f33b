//! Dense vectors keyed by `(text id, encoder mode)`.
//!
//! Every vector is L2-normalized on insertion, so inner products are cosine
//! similarities. Stores persist in a small binary format:
//!
//! ```text
//! b"RGRV1" | dim: u32 LE | records*
//! record  = id_len: u16 LE | id: UTF-8 | mode: u8 | dim x f32 LE
//! ```

mod remote;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use remote::{
    EmbedProviderConfig, EmbedRequest, EmbedResponse, EmbeddingTransport, HttpTransport, RemoteEmbedder,
};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RGRV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Query,
    Doc,
}

impl Mode {
    fn to_byte(self) -> u8 {
        match self {
            Mode::Query => 0,
            Mode::Doc => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Mode::Query),
            1 => Ok(Mode::Doc),
            other => Err(Error::Format(format!("unknown mode byte {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Query => "query",
            Mode::Doc => "doc",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable id for a derived text (selected sentences, bridge variants).
pub fn text_key(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("t:{}", hex::encode(&digest[..16]))
}

/// Scales `values` to unit L2 norm.
pub fn l2_normalize(values: &mut [f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector".into()));
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Format("zero vector cannot be normalized".into()));
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    entries: BTreeMap<(String, Mode), Vec<f64>>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        VectorStore {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Normalizes and stores a vector, replacing any previous entry.
    pub fn insert(&mut self, id: impl Into<String>, mode: Mode, values: Vec<f64>) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
                context: format!("vector '{id}' ({mode})"),
            });
        }
        if id.len() > usize::from(u16::MAX) {
            return Err(Error::Format(format!("id longer than {} bytes", u16::MAX)));
        }
        let mut values = values;
        l2_normalize(&mut values).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("vector '{id}' ({mode})")),
            other => other,
        })?;
        self.entries.insert((id, mode), values);
        Ok(())
    }

    pub fn contains(&self, id: &str, mode: Mode) -> bool {
        self.entries.contains_key(&(id.to_string(), mode))
    }

    pub fn get(&self, id: &str, mode: Mode) -> Result<&[f64]> {
        self.entries
            .get(&(id.to_string(), mode))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding {
                id: id.to_string(),
                mode,
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Mode, &[f64])> {
        self.entries
            .iter()
            .map(|((id, mode), v)| (id.as_str(), *mode, v.as_slice()))
    }

    /// Copies every entry of `other` into this store.
    pub fn merge(&mut self, other: &VectorStore) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
                context: "merging stores".into(),
            });
        }
        for ((id, mode), v) in &other.entries {
            self.entries.insert((id.clone(), *mode), v.clone());
        }
        Ok(())
    }

    /// Inner products between the `query_mode` vector of `query_id` and the
    /// doc-mode vectors of each candidate.
    pub fn score(&self, query_id: &str, query_mode: Mode, candidate_ids: &[impl AsRef<str>]) -> Result<Vec<f64>> {
        let q = self.get(query_id, query_mode)?;
        candidate_ids
            .iter()
            .map(|c| self.get(c.as_ref(), Mode::Doc).map(|d| dot(q, d)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic, expected RGRV1".into()));
        }
        let dim = u32::from_le_bytes(cur.array()?) as usize;
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        let mut store = VectorStore::new(dim);
        while !cur.done() {
            let id_len = u16::from_le_bytes(cur.array()?) as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
                .to_string();
            let mode = Mode::from_byte(cur.take(1)?[0])?;
            let raw = cur.take(dim * 4).map_err(|_| Error::DimensionMismatch {
                expected: dim,
                got: cur.remaining() / 4,
                context: format!("truncated record '{id}'"),
            })?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            store.insert(id, mode, values)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.entries.len() * (self.dim * 4 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for ((id, mode), v) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(mode.to_byte());
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw_record(id: &str, mode: u8, values: &[f32]) -> Vec<u8> {
        let mut out = (id.len() as u16).to_le_bytes().to_vec();
        out.extend_from_slice(id.as_bytes());
        out.push(mode);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn header(dim: u32) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&dim.to_le_bytes());
        out
    }

    #[test]
    fn load_normalizes() {
        let mut bytes = header(3);
        bytes.extend(raw_record("a", 1, &[3.0, 4.0, 0.0]));
        let store = VectorStore::from_bytes(&bytes).unwrap();
        let v = store.get("a", Mode::Doc).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12 && v[2] == 0.0);
    }

    #[test]
    fn mismatched_record_dims_fail() {
        // Header says 3; the second record carries 4 values, which shifts the
        // stream and cannot parse as a valid record.
        let mut bytes = header(3);
        bytes.extend(raw_record("a", 1, &[1.0, 0.0, 0.0]));
        bytes.extend(raw_record("b", 1, &[1.0, 0.0, 0.0, 0.0]));
        assert!(VectorStore::from_bytes(&bytes).is_err());

        let mut store = VectorStore::new(3);
        let err = store.insert("b", Mode::Doc, vec![1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, got: 4, .. }));
    }

    #[test]
    fn truncated_record_reports_dimension() {
        let mut bytes = header(4);
        bytes.extend(raw_record("a", 0, &[1.0, 2.0]));
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(Error::DimensionMismatch { expected: 4, got: 2, .. })
        ));
    }

    #[test]
    fn rejects_bad_magic_and_non_finite() {
        assert!(matches!(VectorStore::from_bytes(b"RGRV2\x01\0\0\0"), Err(Error::Format(_))));
        let mut bytes = header(2);
        bytes.extend(raw_record("a", 0, &[f32::NAN, 1.0]));
        assert!(matches!(VectorStore::from_bytes(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn round_trip_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = VectorStore::new(16);
        let mut inputs = Vec::new();
        for i in 0..100 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mode = if i % 2 == 0 { Mode::Query } else { Mode::Doc };
            store.insert(format!("id{i}"), mode, v.clone()).unwrap();
            inputs.push((format!("id{i}"), mode, v));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rgrv");
        store.save(&path).unwrap();
        let back = VectorStore::load(&path).unwrap();
        assert_eq!(back.len(), 100);
        for (id, mode, v) in inputs {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (got, want) in back.get(&id, mode).unwrap().iter().zip(&v) {
                assert!((got - want / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_identity_orthogonal_and_missing() {
        let mut s = VectorStore::new(2);
        s.insert("q", Mode::Query, vec![1.0, 0.0]).unwrap();
        s.insert("same", Mode::Doc, vec![2.0, 0.0]).unwrap();
        s.insert("orth", Mode::Doc, vec![0.0, 5.0]).unwrap();
        assert_eq!(s.score("q", Mode::Query, &["same", "orth"]).unwrap(), vec![1.0, 0.0]);
        match s.score("q", Mode::Query, &["nope"]) {
            Err(Error::MissingEmbedding { id, mode }) => {
                assert_eq!(id, "nope");
                assert_eq!(mode, Mode::Doc);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.score("q", Mode::Doc, &["same"]).is_err());
    }

    #[test]
    fn score_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let mut s = VectorStore::new(dim);
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.insert("q", Mode::Query, q.clone()).unwrap();
        let mut cands = Vec::new();
        let mut raw = Vec::new();
        for i in 0..5 {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(format!("c{i}"), Mode::Doc, c.clone()).unwrap();
            cands.push(format!("c{i}"));
            raw.push(c);
        }
        let scores = s.score("q", Mode::Query, &cands).unwrap();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, c) in raw.iter().enumerate() {
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for d in 0..dim {
                acc += (q[d] / qn) * (c[d] / cn);
            }
            assert!((scores[i] - acc).abs() < 1e-9);
            assert!(scores[i].abs() <= 1.0 + 1e-6);
            assert_eq!(s.score("q", Mode::Query, &[&cands[i]]).unwrap()[0], scores[i]);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut v = vec![0.3, -2.0, 7.5, 1e-3];
        l2_normalize(&mut v).unwrap();
        let once = v.clone();
        l2_normalize(&mut v).unwrap();
        for (a, b) in once.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(l2_normalize(&mut [0.0, 0.0]).is_err());
    }

    #[test]
    fn text_key_is_stable() {
        assert_eq!(text_key("abc"), text_key("abc"));
        assert_ne!(text_key("abc"), text_key("abd"));
        assert_eq!(text_key("abc").len(), 34);
    }
}
