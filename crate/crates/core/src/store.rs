//! The MMEB container: keyed `f32` matrices (embeddings or contact maps)
//! in a fixed little-endian layout.
//!
//! ```text
//! "MMEB" | version u32 | count u32 | kind u8
//! count × ( key_len u32 | key utf-8 | rows u32 | cols u32 | rows·cols f32 )
//! ```

use std::collections::HashMap;
use std::path::Path;

use tcrbind_autograd::{mix_seed, uniform_from_counter};
use thiserror::Error;

use crate::contact::{ContactError, ContactMap};
use crate::sequence::{ShapedSequence, Token};

pub const MAGIC: &[u8; 4] = b"MMEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("store holds {found:?} records, expected {expected:?}")]
    WrongKind {
        expected: StoreKind,
        found: StoreKind,
    },
    #[error("file truncated at byte {0}")]
    TruncatedFile(usize),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("key is not valid UTF-8 at byte {0}")]
    BadKey(usize),
    #[error("record {key:?}: {rows}x{cols} does not match {len} values")]
    BadShape {
        key: String,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("record {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error("record {key:?}: {source}")]
    Contact {
        key: String,
        #[source]
        source: ContactError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StoreKind {
    Embeddings = 0,
    ContactMaps = 1,
}

impl TryFrom<u8> for StoreKind {
    type Error = StoreError;

    fn try_from(v: u8) -> Result<Self, StoreError> {
        match v {
            0 => Ok(Self::Embeddings),
            1 => Ok(Self::ContactMaps),
            other => Err(StoreError::UnknownKind(other)),
        }
    }
}

/// One keyed row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRecord {
    pub key: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub type EmbeddingMatrix = MatrixRecord;

impl MatrixRecord {
    pub fn new(
        key: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, StoreError> {
        let key = key.into();
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(StoreError::BadShape {
                key,
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(key));
        }
        Ok(Self {
            key,
            rows,
            cols,
            data,
        })
    }

    pub fn from_contact_map(key: impl Into<String>, map: &ContactMap) -> Self {
        let n = map.size();
        Self {
            key: key.into(),
            rows: n,
            cols: n,
            data: map.values().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_contact_map(&self) -> Result<ContactMap, StoreError> {
        let wide: Vec<f64> = self.data.iter().map(|&v| f64::from(v)).collect();
        ContactMap::from_row_major(self.rows, self.cols, &wide).map_err(|source| {
            StoreError::Contact {
                key: self.key.clone(),
                source,
            }
        })
    }

    /// The matrix fitted to a shaped sequence: rows of real residues are
    /// copied (widened to `f64`), padded or missing rows are zero.
    pub fn shaped(&self, seq: &ShapedSequence) -> Vec<f64> {
        let mut out = vec![0.0; seq.len() * self.cols];
        for (i, tok) in seq.tokens.iter().enumerate() {
            if matches!(tok, Token::Residue(_)) && i < self.rows {
                for (o, &v) in out[i * self.cols..(i + 1) * self.cols]
                    .iter_mut()
                    .zip(&self.data[i * self.cols..(i + 1) * self.cols])
                {
                    *o = f64::from(v);
                }
            }
        }
        out
    }
}

/// A loaded store, indexed by key.
#[derive(Debug, Clone)]
pub struct MatrixStore {
    kind: StoreKind,
    records: Vec<MatrixRecord>,
    index: HashMap<String, usize>,
}

impl MatrixStore {
    pub fn new(kind: StoreKind, records: Vec<MatrixRecord>) -> Result<Self, StoreError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.key.clone(), i).is_some() {
                return Err(StoreError::DuplicateKey(r.key.clone()));
            }
        }
        Ok(Self {
            kind,
            records,
            index,
        })
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&MatrixRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[MatrixRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MatrixRecord> {
        self.records
    }

    pub fn expect_kind(self, kind: StoreKind) -> Result<Self, StoreError> {
        if self.kind != kind {
            return Err(StoreError::WrongKind {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self.kind, &self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let kind = StoreKind::try_from(r.take(1)?[0])?;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let key_len = r.u32()? as usize;
            let key_at = r.pos;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|_| StoreError::BadKey(key_at))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let payload = r.take(rows * cols * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(MatrixRecord {
                key,
                rows,
                cols,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(StoreError::TrailingBytes(bytes.len() - r.pos));
        }
        Self::new(kind, records)
    }
}

fn encode(kind: StoreKind, records: &[MatrixRecord]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|r| 12 + r.key.len() + 4 * r.data.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.push(kind as u8);
    for r in records {
        out.extend_from_slice(&(r.key.len() as u32).to_le_bytes());
        out.extend_from_slice(r.key.as_bytes());
        out.extend_from_slice(&(r.rows as u32).to_le_bytes());
        out.extend_from_slice(&(r.cols as u32).to_le_bytes());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(StoreError::TruncatedFile(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes records to `path`. Keys must be unique.
pub fn write_store(
    path: impl AsRef<Path>,
    kind: StoreKind,
    records: &[MatrixRecord],
) -> Result<(), StoreError> {
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.key.as_str()) {
            return Err(StoreError::DuplicateKey(r.key.clone()));
        }
    }
    std::fs::write(path, encode(kind, records))?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<MatrixStore, StoreError> {
    MatrixStore::from_bytes(&std::fs::read(path)?)
}

/// Standard normal draw for `key`, by Box–Muller on two counter-based
/// uniforms.
fn standard_normal(key: u64) -> f64 {
    let u1 = uniform_from_counter(key, 0);
    let u2 = uniform_from_counter(key, 1);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic pseudo-embedding: entry `(i, j)` depends only on
/// `(seed, residue at i, i, j)`; padded rows are zero.
pub fn mock_embed(seq: &ShapedSequence, dim: usize, seed: u64) -> EmbeddingMatrix {
    assert!(dim >= 1, "embedding dimension must be positive");
    let scale = 1.0 / (dim as f64).sqrt();
    let mut data = vec![0f32; seq.len() * dim];
    for (i, tok) in seq.tokens.iter().enumerate() {
        if let Token::Residue(code) = tok {
            for j in 0..dim {
                let key = mix_seed(&[seed, u64::from(*code), i as u64, j as u64]);
                data[i * dim + j] = (standard_normal(key) * scale) as f32;
            }
        }
    }
    MatrixRecord {
        key: seq.kept().to_string(),
        rows: seq.len(),
        cols: dim,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::AaSequence;

    #[test]
    fn empty_store_is_header_only() {
        let bytes = MatrixStore::new(StoreKind::Embeddings, vec![])
            .unwrap()
            .to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..4], b"MMEB");
    }

    #[test]
    fn single_record_byte_count() {
        let rec = MatrixRecord::new("AB", 2, 3, vec![0.5; 6]).unwrap();
        let bytes = encode(StoreKind::Embeddings, &[rec]);
        assert_eq!(bytes.len(), 13 + 4 + 2 + 4 + 4 + 24);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(StoreKind::Embeddings, &[]);
        bytes[0] = b'X';
        assert!(matches!(
            MatrixStore::from_bytes(&bytes),
            Err(StoreError::BadMagic(_))
        ));
        let mut bytes = encode(StoreKind::Embeddings, &[]);
        bytes[4] = 2;
        assert!(matches!(
            MatrixStore::from_bytes(&bytes),
            Err(StoreError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn count_beyond_payload_is_truncation() {
        let recs: Vec<_> = (0..4)
            .map(|i| MatrixRecord::new(format!("K{i}"), 1, 2, vec![1.0, 2.0]).unwrap())
            .collect();
        let mut bytes = encode(StoreKind::Embeddings, &recs);
        bytes[8] = 5;
        assert!(matches!(
            MatrixStore::from_bytes(&bytes),
            Err(StoreError::TruncatedFile(_))
        ));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = MatrixRecord::new("A", 1, 1, vec![1.0]).unwrap();
        let bytes = encode(StoreKind::Embeddings, &[r.clone(), r.clone()]);
        assert!(matches!(
            MatrixStore::from_bytes(&bytes),
            Err(StoreError::DuplicateKey(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_store(
                dir.path().join("s.mmeb"),
                StoreKind::Embeddings,
                &[r.clone(), r]
            ),
            Err(StoreError::DuplicateKey(_))
        ));
    }

    #[test]
    fn mock_embedding_properties() {
        let a = AaSequence::parse("GILGFVFTL").unwrap().shape(22);
        let b = AaSequence::parse("GILAFVFTL").unwrap().shape(22);
        let ea = mock_embed(&a, 16, 7);
        assert_eq!(ea, mock_embed(&a, 16, 7));
        let eb = mock_embed(&b, 16, 7);
        for row in 0..22 {
            let same = ea.data[row * 16..(row + 1) * 16] == eb.data[row * 16..(row + 1) * 16];
            assert_eq!(same, row != 3, "row {row}");
        }
        assert!(ea.data[9 * 16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mock_row_statistics() {
        let s = AaSequence::parse("ACDEFGHIKLMNPQRSTVWY").unwrap().shape(22);
        let d = 1024;
        let e = mock_embed(&s, d, 3);
        for row in e.data.chunks(d).take(20) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            assert!(mean.abs() <= 0.02, "mean {mean}");
            assert!((0.8 / 1024.0..=1.2 / 1024.0).contains(&var), "var {var}");
        }
    }

    #[test]
    fn shaping_after_lookup() {
        let rec = MatrixRecord::new("GIL", 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = AaSequence::parse("GIL").unwrap().shape(5);
        assert_eq!(
            rec.shaped(&s),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0]
        );
        let s = AaSequence::parse("GIL").unwrap().shape(2);
        assert_eq!(rec.shaped(&s), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
