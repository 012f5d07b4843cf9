//! Exact cosine top-k over chunk embeddings.
//!
//! Corpora here are single documents of at most a few hundred chunks, so the
//! index is a flat list scanned in full for every query.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::llm::embed::{dot, normalize};

pub const DEFAULT_TOP_K: usize = 5;
const UNIT_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("cannot build an index over zero chunks")]
    NoChunks,
    #[error("duplicate chunk {chunk_id} of document `{doc_id}`")]
    DuplicateChunk { doc_id: String, chunk_id: usize },
    #[error("embedding failed for chunk {chunk_id}: {reason}")]
    EmbeddingFailure { chunk_id: usize, reason: String },
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector for chunk {0} is not unit-norm")]
    NotUnitNorm(usize),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: usize,
    pub doc_id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: usize,
    pub score: f32,
}

impl ChunkIndex {
    /// Embed every chunk with `embed` (called once with all texts, in
    /// order). Vectors are normalized on the way in.
    pub fn build<E>(chunks: &[Chunk], embed: E) -> Result<Self, IndexError>
    where
        E: FnOnce(&[String]) -> Result<Vec<Vec<f32>>, String>,
    {
        if chunks.is_empty() {
            return Err(IndexError::NoChunks);
        }
        let mut seen = BTreeSet::new();
        for c in chunks {
            if !seen.insert((c.doc_id.as_str(), c.chunk_id)) {
                return Err(IndexError::DuplicateChunk {
                    doc_id: c.doc_id.clone(),
                    chunk_id: c.chunk_id,
                });
            }
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embed(&texts).map_err(|reason| IndexError::EmbeddingFailure {
            chunk_id: chunks[0].chunk_id,
            reason,
        })?;
        if vectors.len() != chunks.len() {
            let at = chunks.get(vectors.len()).unwrap_or(&chunks[0]);
            return Err(IndexError::EmbeddingFailure {
                chunk_id: at.chunk_id,
                reason: format!("{} vectors for {} chunks", vectors.len(), chunks.len()),
            });
        }
        let dim = vectors[0].len();
        let mut entries = Vec::with_capacity(chunks.len());
        for (c, mut v) in chunks.iter().zip(vectors) {
            if v.len() != dim || dim == 0 {
                return Err(IndexError::EmbeddingFailure {
                    chunk_id: c.chunk_id,
                    reason: format!("dimension {} (expected {dim})", v.len()),
                });
            }
            if !normalize(&mut v) {
                return Err(IndexError::EmbeddingFailure {
                    chunk_id: c.chunk_id,
                    reason: "zero-norm vector".into(),
                });
            }
            entries.push(IndexEntry {
                chunk_id: c.chunk_id,
                doc_id: c.doc_id.clone(),
                vector: v,
            });
        }
        Ok(Self { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-check the structural invariants (used after loading from disk).
    pub fn validate(&self) -> Result<(), IndexError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(IndexError::DimensionMismatch {
                    expected: self.dim,
                    got: e.vector.len(),
                });
            }
            if (dot(&e.vector, &e.vector).sqrt() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(IndexError::NotUnitNorm(e.chunk_id));
            }
            if !seen.insert((e.doc_id.as_str(), e.chunk_id)) {
                return Err(IndexError::DuplicateChunk {
                    doc_id: e.doc_id.clone(),
                    chunk_id: e.chunk_id,
                });
            }
        }
        Ok(())
    }

    /// The `min(k, len)` highest-scoring chunks, by descending cosine, ties
    /// broken by ascending chunk id.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<ScoredChunk>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<ScoredChunk> = self
            .entries
            .iter()
            .map(|e| ScoredChunk {
                chunk_id: e.chunk_id,
                score: dot(&e.vector, query),
            })
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(k);
        Ok(scored)
    }
}

fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.chunk_id.cmp(&b.chunk_id))
}
