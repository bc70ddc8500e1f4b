//! Embedders and the exact cosine index over item descriptions.
//!
//! Every vector handed out by a provider is L2-normalised (or the zero vector
//! for text with no tokens), so cosine similarity reduces to a dot product.
//! The on-disk index layout is described in `docs/index-format.md`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ItemCatalog;
use crate::textmetrics::tokenize;
use crate::util::fnv1a64;

pub const DEFAULT_MOCK_DIM: usize = 256;

const INDEX_MAGIC: &[u8; 4] = b"RPVI";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("provider returned {got} vectors for {expected} texts")]
    BatchSize { expected: usize, got: usize },
    #[error("dimension mismatch: index has {index}, query has {query}")]
    Dimension { index: usize, query: usize },
    #[error("cannot build an index over an empty catalog")]
    EmptyCatalog,
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A fixed-length embedding. `norm` is the L2 norm of `values` as stored:
/// 1 for normalised vectors, 0 for the degenerate zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub norm: f32,
}

impl EmbeddingVector {
    /// Scales `values` to unit length. An all-zero input stays zero with
    /// `norm == 0`.
    pub fn normalized(mut values: Vec<f32>) -> Self {
        let norm = values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            values.iter_mut().for_each(|v| *v = 0.0);
            return Self { values, norm: 0.0 };
        }
        for v in values.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
        Self { values, norm: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }
}

/// Dot product of unit vectors in f64, with zero vectors scoring 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    dot(&a.values, &b.values)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Anything that turns text into vectors.
///
/// `embed_batch` must preserve order and return exactly one vector per text.
/// Implementations are shared across worker threads.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut out = self.embed_batch(&[text])?;
        match out.len() {
            1 => Ok(out.remove(0)),
            got => Err(EmbeddingError::BatchSize { expected: 1, got }),
        }
    }
}

/// Deterministic hashed bag-of-tokens embedder.
///
/// Each token lands in bucket `fnv1a64(token) % dim` with sign taken from the
/// hash's top bit. Pure and lock-free, so concurrent calls never serialise.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    id: String,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "mock embedder dimension must be positive");
        Self {
            dim,
            id: format!("mock-fnv1a-bag-d{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut buckets = vec![0f32; self.dim];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            buckets[bucket] += sign;
        }
        EmbeddingVector::normalized(buckets)
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_MOCK_DIM)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

/// Row-major matrix of item embeddings, rows in ascending `item_id` order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    provider_id: String,
    dim: usize,
    item_ids: Vec<String>,
    matrix: Vec<f32>,
    zero_rows: Vec<bool>,
}

/// Heap entry ordered so that the *worst* candidate sits on top.
struct Candidate {
    score: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Lower score is worse; on equal score the later row (larger id) is worse.
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.row.cmp(&other.row))
    }
}

impl VectorIndex {
    /// Embeds every description in catalog order. Fails as a whole if the
    /// provider fails.
    pub fn build(catalog: &ItemCatalog, provider: &dyn EmbeddingProvider) -> Result<Self, EmbeddingError> {
        if catalog.is_empty() {
            return Err(EmbeddingError::EmptyCatalog);
        }
        let item_ids: Vec<String> = catalog.items().map(|i| i.item_id.clone()).collect();
        let texts: Vec<&str> = catalog.items().map(|i| i.description.as_str()).collect();
        let vectors = provider.embed_batch(&texts)?;
        if vectors.len() != texts.len() {
            return Err(EmbeddingError::BatchSize {
                expected: texts.len(),
                got: vectors.len(),
            });
        }
        Self::from_vectors(provider.provider_id(), item_ids, vectors)
    }

    pub fn from_vectors(
        provider_id: &str,
        item_ids: Vec<String>,
        vectors: Vec<EmbeddingVector>,
    ) -> Result<Self, EmbeddingError> {
        let dim = vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
        let mut matrix = Vec::with_capacity(dim * vectors.len());
        let mut zero_rows = Vec::with_capacity(vectors.len());
        for v in &vectors {
            if v.dim() != dim {
                return Err(EmbeddingError::Dimension {
                    index: dim,
                    query: v.dim(),
                });
            }
            matrix.extend_from_slice(&v.values);
            zero_rows.push(v.is_zero());
        }
        Ok(Self {
            provider_id: provider_id.to_string(),
            dim,
            item_ids,
            matrix,
            zero_rows,
        })
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.item_ids.binary_search_by(|id| id.as_str().cmp(item_id)).ok()
    }

    pub fn row(&self, position: usize) -> &[f32] {
        &self.matrix[position * self.dim..(position + 1) * self.dim]
    }

    /// The stored vector for `item_id`.
    pub fn vector(&self, item_id: &str) -> Option<EmbeddingVector> {
        self.position(item_id).map(|p| EmbeddingVector {
            values: self.row(p).to_vec(),
            norm: if self.zero_rows[p] { 0.0 } else { 1.0 },
        })
    }

    fn score_row(&self, query: &EmbeddingVector, position: usize) -> f64 {
        if query.is_zero() || self.zero_rows[position] {
            0.0
        } else {
            dot(&query.values, self.row(position))
        }
    }

    /// Exact top-`n` by cosine, ties by ascending item id.
    pub fn retrieve_top_n(&self, query: &EmbeddingVector, n: usize) -> Result<Vec<ScoredItem>, EmbeddingError> {
        self.retrieve_top_n_where(query, n, |_| true)
    }

    /// Like [`Self::retrieve_top_n`], considering only items for which
    /// `keep` returns true. Filtering happens before truncation.
    pub fn retrieve_top_n_where(
        &self,
        query: &EmbeddingVector,
        n: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Vec<ScoredItem>, EmbeddingError> {
        if query.dim() != self.dim {
            return Err(EmbeddingError::Dimension {
                index: self.dim,
                query: query.dim(),
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(n + 1);
        for (row, id) in self.item_ids.iter().enumerate() {
            if !keep(id) {
                continue;
            }
            let cand = Candidate {
                score: self.score_row(query, row),
                row,
            };
            if heap.len() < n {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        // `into_sorted_vec` is ascending under our ordering, i.e. best first.
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| ScoredItem {
                item_id: self.item_ids[c.row].clone(),
                score: c.score,
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.provider_id)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.item_ids.len() as u32).to_le_bytes())?;
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.item_ids {
            write_str(&mut w, id)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.matrix.len() * 4 + 64);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let provider_id = read_str(&mut r)?;
        let dim = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                values.push(f32::from_le_bytes(b));
            }
            let zero = values.iter().all(|v| *v == 0.0);
            rows.push(EmbeddingVector {
                values,
                norm: if zero { 0.0 } else { 1.0 },
            });
        }
        let mut item_ids = Vec::with_capacity(count);
        for _ in 0..count {
            item_ids.push(read_str(&mut r)?);
        }
        if item_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EmbeddingError::Format("item ids not strictly ascending".into()));
        }
        Self::from_vectors(&provider_id, item_ids, rows)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, EmbeddingError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| EmbeddingError::Format(e.to_string()))
}
