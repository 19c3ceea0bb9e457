//! Exact cosine top-k index over fused KB vectors.
//!
//! Vectors are unit-normalized in `f64` and stored as packed `f32` rows, so
//! a score only divides by the query norm and entries with equal source
//! vectors score exactly equal. Dot products and norms are
//! accumulated in `f64`. Search is an exhaustive scan, so results are exact
//! and ordering is fully determined by `(score desc, entry_id asc)`.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "KBVQIDX\0"
//! version      u32
//! dim          u32
//! entry_count  u64
//! payload_len  u64
//! checksum     u32      CRC-32 of the payload
//! payload:
//!   entry_count * dim f32 vectors
//!   entry_count metadata records:
//!     entry_id u64, then entity_id, article_id, section_id,
//!     section_text, image_ref as (u32 length, UTF-8 bytes)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::EmbeddingVector;

pub const INDEX_MAGIC: &[u8; 8] = b"KBVQIDX\0";
pub const INDEX_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8 + 4;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has dim {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate entry_id {0}")]
    DuplicateId(u64),
    #[error("index is sealed")]
    Sealed,
    #[error("index is not sealed")]
    NotSealed,
    #[error("index is empty")]
    Empty,
    #[error("zero-norm vector ({0})")]
    ZeroVector(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index dimension must be at least 1")]
    InvalidDim,
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("truncated index file")]
    Truncated,
    #[error("malformed index payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One `<image, section>` unit of the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub entry_id: u64,
    pub entity_id: String,
    pub article_id: String,
    pub section_id: String,
    pub vector: EmbeddingVector,
    pub section_text: String,
    pub image_ref: String,
}

/// Everything about an entry except its vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub entry_id: u64,
    pub entity_id: String,
    pub article_id: String,
    pub section_id: String,
    pub section_text: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub entry_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexHeader {
    pub format_version: u32,
    pub dim: u32,
    pub entry_count: u64,
    pub payload_len: u64,
    pub checksum: u32,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<EntryMeta>,
    positions: HashMap<u64, usize>,
    sealed: bool,
}

const LANES: usize = 8;

/// Dot product of an `f64` query against an `f32` row, accumulated in `f64`
/// with a fixed 8-lane order.
#[inline]
fn dot_mixed(q: &[f64], row: &[f32]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let qc = q.chunks_exact(LANES);
    let rc = row.chunks_exact(LANES);
    let tail: f64 = qc
        .remainder()
        .iter()
        .zip(rc.remainder())
        .map(|(a, &b)| a * b as f64)
        .sum();
    for (qs, rs) in qc.zip(rc) {
        for l in 0..LANES {
            acc[l] += qs[l] * rs[l] as f64;
        }
    }
    let half = |a: &[f64]| (a[0] + a[1]) + (a[2] + a[3]);
    half(&acc[..4]) + half(&acc[4..]) + tail
}

/// Stored rows are unit vectors up to f32 rounding; anything far off was not
/// written by this index.
const ROW_NORM_TOLERANCE: f64 = 1e-4;

fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.entry_id.cmp(&b.entry_id))
}

/// Keeps the best `k` candidates under the ranking order, sorted.
fn select_top(mut scored: Vec<ScoredCandidate>, k: usize) -> Vec<ScoredCandidate> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

impl VectorIndex {
    pub fn new(dim: usize) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::InvalidDim);
        }
        Ok(Self {
            dim,
            data: Vec::new(),
            meta: Vec::new(),
            positions: HashMap::new(),
            sealed: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Adds a batch atomically: either every entry is inserted or none is.
    pub fn add_entries<I>(&mut self, entries: I) -> Result<usize, IndexError>
    where
        I: IntoIterator<Item = KbEntry>,
    {
        if self.sealed {
            return Err(IndexError::Sealed);
        }
        let entries: Vec<KbEntry> = entries.into_iter().collect();
        let mut batch_ids = HashMap::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len() * self.dim);
        for entry in &entries {
            if entry.vector.dim() != self.dim {
                return Err(IndexError::DimensionMismatch {
                    expected: self.dim,
                    actual: entry.vector.dim(),
                });
            }
            if self.positions.contains_key(&entry.entry_id)
                || batch_ids.insert(entry.entry_id, ()).is_some()
            {
                return Err(IndexError::DuplicateId(entry.entry_id));
            }
            let norm = entry.vector.norm();
            if norm == 0.0 {
                return Err(IndexError::ZeroVector(format!("entry {}", entry.entry_id)));
            }
            rows.extend(entry.vector.values().iter().map(|&v| (v / norm) as f32));
        }
        let added = entries.len();
        self.data.extend_from_slice(&rows);
        for entry in entries {
            self.positions.insert(entry.entry_id, self.meta.len());
            self.meta.push(EntryMeta {
                entry_id: entry.entry_id,
                entity_id: entry.entity_id,
                article_id: entry.article_id,
                section_id: entry.section_id,
                section_text: entry.section_text,
                image_ref: entry.image_ref,
            });
        }
        Ok(added)
    }

    pub fn entry(&self, entry_id: u64) -> Option<&EntryMeta> {
        self.positions.get(&entry_id).map(|&p| &self.meta[p])
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.meta
    }

    /// Stored vector of an entry: unit-normalized, then rounded to f32.
    pub fn vector(&self, entry_id: u64) -> Option<&[f32]> {
        self.positions
            .get(&entry_id)
            .map(|&p| &self.data[p * self.dim..(p + 1) * self.dim])
    }

    /// All entries sharing an article, in insertion order.
    pub fn article_sections(&self, article_id: &str) -> Vec<&EntryMeta> {
        self.meta
            .iter()
            .filter(|m| m.article_id == article_id)
            .collect()
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<f64, IndexError> {
        if !self.sealed {
            return Err(IndexError::NotSealed);
        }
        if self.meta.is_empty() {
            return Err(IndexError::Empty);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector("query".into()));
        }
        Ok(qn)
    }

    fn score_range(&self, q: &[f64], qn: f64, start: usize, end: usize) -> Vec<ScoredCandidate> {
        (start..end)
            .map(|p| {
                let row = &self.data[p * self.dim..(p + 1) * self.dim];
                let score = (dot_mixed(q, row) / qn).clamp(-1.0, 1.0);
                ScoredCandidate {
                    entry_id: self.meta[p].entry_id,
                    score,
                }
            })
            .collect()
    }

    /// Exact top-k by cosine similarity.
    pub fn search_topk(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<ScoredCandidate>, IndexError> {
        let qn = self.check_query(query, k)?;
        let scored = self.score_range(query.values(), qn, 0, self.len());
        Ok(select_top(scored, k))
    }

    /// Same result as [`search_topk`](Self::search_topk), scanning with up to
    /// `threads` workers.
    pub fn search_topk_threaded(
        &self,
        query: &EmbeddingVector,
        k: usize,
        threads: usize,
    ) -> Result<Vec<ScoredCandidate>, IndexError> {
        let qn = self.check_query(query, k)?;
        let threads = threads.clamp(1, self.len());
        if threads == 1 {
            return self.search_topk(query, k);
        }
        let chunk = self.len().div_ceil(threads);
        let q = query.values();
        let partials: Vec<Vec<ScoredCandidate>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let start = t * chunk;
                    let end = ((t + 1) * chunk).min(self.len());
                    s.spawn(move || select_top(self.score_range(q, qn, start, end), k))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("search worker panicked"))
                .collect()
        });
        Ok(select_top(partials.into_iter().flatten().collect(), k))
    }

    fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4 + self.meta.len() * 64);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.meta {
            out.extend_from_slice(&m.entry_id.to_le_bytes());
            for s in [
                &m.entity_id,
                &m.article_id,
                &m.section_id,
                &m.section_text,
                &m.image_ref,
            ] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        if !self.sealed {
            return Err(IndexError::NotSealed);
        }
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_header(bytes: &[u8]) -> Result<IndexHeader, IndexError> {
        if bytes.len() < 8 {
            return Err(IndexError::Truncated);
        }
        if &bytes[..8] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(IndexError::Truncated);
        }
        let mut r = Cursor::new(&bytes[8..HEADER_LEN]);
        Ok(IndexHeader {
            format_version: r.u32()?,
            dim: r.u32()?,
            entry_count: r.u64()?,
            payload_len: r.u64()?,
            checksum: r.u32()?,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let header = Self::read_header(bytes)?;
        if header.format_version != INDEX_FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: header.format_version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let payload = &bytes[HEADER_LEN..];
        if (payload.len() as u64) < header.payload_len {
            return Err(IndexError::Truncated);
        }
        if (payload.len() as u64) > header.payload_len {
            return Err(IndexError::Malformed("trailing bytes after payload".into()));
        }
        let actual = crc32fast::hash(payload);
        if actual != header.checksum {
            return Err(IndexError::ChecksumMismatch {
                expected: header.checksum,
                actual,
            });
        }
        let dim = header.dim as usize;
        let count = usize::try_from(header.entry_count)
            .map_err(|_| IndexError::Malformed("entry count overflows".into()))?;
        let mut index = Self::new(dim)?;
        let mut r = Cursor::new(payload);
        let n_floats = count
            .checked_mul(dim)
            .ok_or_else(|| IndexError::Malformed("vector block overflows".into()))?;
        let mut data = Vec::with_capacity(n_floats.min(payload.len() / 4));
        for _ in 0..n_floats {
            data.push(f32::from_le_bytes(r.array::<4>()?));
        }
        let mut meta = Vec::with_capacity(count.min(payload.len()));
        for _ in 0..count {
            let entry_id = r.u64()?;
            meta.push(EntryMeta {
                entry_id,
                entity_id: r.string()?,
                article_id: r.string()?,
                section_id: r.string()?,
                section_text: r.string()?,
                image_ref: r.string()?,
            });
        }
        if !r.is_empty() {
            return Err(IndexError::Malformed("unread payload bytes".into()));
        }
        for (p, m) in meta.iter().enumerate() {
            if index.positions.insert(m.entry_id, p).is_some() {
                return Err(IndexError::DuplicateId(m.entry_id));
            }
        }
        for (p, row) in data.chunks_exact(dim).enumerate() {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > ROW_NORM_TOLERANCE {
                return Err(IndexError::Malformed(format!(
                    "row {p} has norm {norm}, expected a unit vector"
                )));
            }
        }
        index.data = data;
        index.meta = meta;
        index.sealed = true;
        Ok(index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() < n {
            return Err(IndexError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IndexError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| IndexError::Malformed(format!("metadata is not UTF-8: {e}")))
    }
}
