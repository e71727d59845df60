//! Demonstration selection by embedding similarity, and the shot-count draw.
//!
//! The default embedder is a hashed TF-IDF bag of words: dependency-free,
//! deterministic, and good enough to pull same-topic transcripts out of a
//! candidate pool. Anything implementing [`Embedder`] can stand in for it.
//!
//! Demonstrations leave this module with their labels already remapped under
//! the mapping in force, plus the mapping's fingerprint, so prompt assembly
//! can verify uniformity instead of consulting the mapping a second time.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::hash::fnv64;
use crate::labelmap::{LabelMapping, MappingError, MappingRef};
use crate::prompt::tokenize_words;
use crate::task::{Corpus, Example};

pub const DEFAULT_EMBED_DIM: usize = 1024;

/// Fixed-dimension embedding; all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// A retrieved few-shot example, packaged for prompt assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub example_id: String,
    pub text: String,
    /// Display names of the example's labels under the packaging mapping,
    /// in label-space order.
    pub display_labels: Vec<String>,
    pub mapping_ref: MappingRef,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("duplicate example id {id:?} in candidate pool")]
    DuplicateId { id: String },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Deterministic text embedding with a fixed dimension.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Bag-of-words embedder: tokens are FNV-hashed into `dim` buckets, weighted
/// by term frequency times a smoothed inverse document frequency fitted on
/// the candidate pool, then L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedTfIdf {
    dim: usize,
    idf: Vec<f32>,
}

impl HashedTfIdf {
    pub fn bucket_of(token: &str, dim: usize) -> usize {
        (fnv64(token.as_bytes()) % dim as u64) as usize
    }

    /// Fits IDF weights on the candidate pool documents.
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        let mut df = vec![0u64; dim];
        let mut n_docs = 0u64;
        for doc in docs {
            n_docs += 1;
            let buckets: BTreeSet<usize> = tokenize_words(doc)
                .iter()
                .map(|t| Self::bucket_of(t, dim))
                .collect();
            for b in buckets {
                df[b] += 1;
            }
        }
        let idf = df
            .iter()
            .map(|&d| (((n_docs + 1) as f64 / (d + 1) as f64).ln() + 1.0) as f32)
            .collect();
        HashedTfIdf { dim, idf }
    }
}

impl Embedder for HashedTfIdf {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0f32; self.dim];
        for token in tokenize_words(text) {
            values[Self::bucket_of(&token, self.dim)] += 1.0;
        }
        for (v, &w) in values.iter_mut().zip(&self.idf) {
            *v *= w;
        }
        let norm = values.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v = ((*v as f64) / norm) as f32;
            }
        }
        EmbeddingVector { values }
    }
}

/// u·v / (‖u‖‖v‖), or 0 when either norm is 0.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if u.dim() != v.dim() {
        return Err(RetrievalError::DimMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let dot: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(&a, &b)| (a as f64) * (b as f64))
        .sum();
    let denom = u.norm() * v.norm();
    if denom == 0.0 {
        Ok(0.0)
    } else {
        Ok(dot / denom)
    }
}

/// Uniform shot count in {0..5}, advancing the caller's generator.
pub fn sample_shot_count<R: Rng>(rng: &mut R) -> usize {
    rng.random_range(0..=5)
}

struct PoolEntry {
    example: Example,
    embedding: EmbeddingVector,
}

/// A frozen candidate pool with precomputed embeddings.
///
/// IDF weights are fitted once on the whole pool; per-query exclusions
/// (the query itself, ids already used) are applied at retrieve time.
pub struct Retriever<E: Embedder = HashedTfIdf> {
    embedder: E,
    entries: Vec<PoolEntry>,
}

impl Retriever<HashedTfIdf> {
    /// Pool over the union of `corpora` with the default hashed TF-IDF
    /// embedder at [`DEFAULT_EMBED_DIM`].
    pub fn from_corpora(corpora: &[&Corpus]) -> Result<Self, RetrievalError> {
        let embedder = HashedTfIdf::fit(
            corpora
                .iter()
                .flat_map(|c| c.examples.iter())
                .map(|e| e.text.as_str()),
            DEFAULT_EMBED_DIM,
        );
        Self::with_embedder(embedder, corpora)
    }
}

impl<E: Embedder> Retriever<E> {
    pub fn with_embedder(embedder: E, corpora: &[&Corpus]) -> Result<Self, RetrievalError> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for corpus in corpora {
            for example in &corpus.examples {
                if !seen.insert(example.id.clone()) {
                    return Err(RetrievalError::DuplicateId {
                        id: example.id.clone(),
                    });
                }
                entries.push(PoolEntry {
                    embedding: embedder.embed(&example.text),
                    example: example.clone(),
                });
            }
        }
        Ok(Retriever { embedder, entries })
    }

    pub fn pool_size(&self) -> usize {
        self.entries.len()
    }

    pub fn embedder(&self) -> &E {
        &self.embedder
    }

    /// Top-`k` pool examples by cosine similarity to the query text,
    /// descending, ties broken by ascending example id. The query's own id
    /// and `exclude_ids` never appear; fewer than `k` are returned when the
    /// eligible pool is small. Labels are remapped under `mapping`.
    pub fn retrieve(
        &self,
        query: &Example,
        k: usize,
        exclude_ids: &BTreeSet<String>,
        mapping: &LabelMapping,
    ) -> Result<Vec<Demonstration>, RetrievalError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let query_emb = self.embedder.embed(&query.text);
        let mut scored: Vec<(f64, &PoolEntry)> = Vec::new();
        for entry in &self.entries {
            if entry.example.id == query.id || exclude_ids.contains(&entry.example.id) {
                continue;
            }
            scored.push((cosine(&query_emb, &entry.embedding)?, entry));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.example.id.cmp(&b.1.example.id)));
        let mapping_ref = mapping.reference();
        scored
            .into_iter()
            .take(k)
            .map(|(_, entry)| {
                let display_labels = display_labels_for(mapping, &entry.example)?;
                Ok(Demonstration {
                    example_id: entry.example.id.clone(),
                    text: entry.example.text.clone(),
                    display_labels,
                    mapping_ref: mapping_ref.clone(),
                })
            })
            .collect()
    }
}

/// The example's gold labels as display names under `mapping`, in
/// label-space order.
pub fn display_labels_for(
    mapping: &LabelMapping,
    example: &Example,
) -> Result<Vec<String>, MappingError> {
    // Resolve each gold label first so unknown labels error even when the
    // entry scan would skip them.
    let mut displays = BTreeSet::new();
    for gold in &example.labels {
        displays.insert(mapping.remap_label(gold)?);
    }
    Ok(mapping
        .entries
        .iter()
        .filter(|e| displays.contains(e.display_name.as_str()))
        .map(|e| e.display_name.clone())
        .collect())
}

/// Writes an `example id -> embedding` cache: a little-endian binary file
/// with a (dimension, count) header, then per entry an id length, the id's
/// UTF-8 bytes, and `dimension` 32-bit floats.
pub fn write_embedding_cache(
    path: &Path,
    dim: usize,
    entries: &[(String, EmbeddingVector)],
) -> Result<(), RetrievalError> {
    let cache_err = |message: String| RetrievalError::Cache {
        path: path.display().to_string(),
        message,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, emb) in entries {
        if emb.dim() != dim {
            return Err(cache_err(format!(
                "entry {id:?} has dimension {}, header says {dim}",
                emb.dim()
            )));
        }
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for &v in &emb.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| cache_err(e.to_string()))?;
    file.write_all(&buf).map_err(|e| cache_err(e.to_string()))
}

pub fn read_embedding_cache(
    path: &Path,
) -> Result<(usize, Vec<(String, EmbeddingVector)>), RetrievalError> {
    let cache_err = |message: String| RetrievalError::Cache {
        path: path.display().to_string(),
        message,
    };
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| cache_err(e.to_string()))?;

    fn take<'a>(raw: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], String> {
        if *pos + n > raw.len() {
            return Err(format!(
                "truncated at byte {pos}: wanted {n} more, have {}",
                raw.len() - *pos
            ));
        }
        let slice = &raw[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    }
    let read_u32 =
        |bytes: &[u8]| u32::from_le_bytes(bytes.try_into().expect("four bytes")) as usize;

    let mut pos = 0usize;
    let dim = read_u32(take(&raw, &mut pos, 4).map_err(&cache_err)?);
    let count = read_u32(take(&raw, &mut pos, 4).map_err(&cache_err)?);
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(take(&raw, &mut pos, 4).map_err(&cache_err)?);
        let id = String::from_utf8(take(&raw, &mut pos, id_len).map_err(&cache_err)?.to_vec())
            .map_err(|e| cache_err(format!("bad id bytes: {e}")))?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let bytes = take(&raw, &mut pos, 4).map_err(&cache_err)?;
            values.push(f32::from_le_bytes(bytes.try_into().expect("four bytes")));
        }
        entries.push((id, EmbeddingVector { values }));
    }
    if pos != raw.len() {
        return Err(cache_err(format!("{} trailing bytes", raw.len() - pos)));
    }
    Ok((dim, entries))
}
