//! Text embeddings behind a pluggable provider.
//!
//! Vectors are stored L2-normalized; similarity is always the full cosine
//! formula evaluated in `f64`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{CallCharge, CostCategory, Usage};
use crate::corpus::{Corpus, ParaIdx};
use crate::util::{fnv1a64, truncate_chars};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum EmbedError {
    #[error("empty text at positions {0:?}")]
    EmptyText(Vec<usize>),
    #[error("embedding transport failure: {0}")]
    Transport(String),
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("provider returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} texts")]
    Count { expected: usize, got: usize },
    #[error("zero or non-finite embedding vector")]
    Degenerate,
}

impl EmbedError {
    fn retryable(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

/// An L2-normalized embedding with its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    norm: f64,
}

impl Embedding {
    /// Normalize raw provider output. Zero and non-finite vectors are rejected.
    pub fn new(raw: Vec<f32>) -> Result<Self, EmbedError> {
        let norm: f64 = raw
            .iter()
            .map(|v| f64::from(*v).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        let values: Vec<f32> = raw.iter().map(|v| (f64::from(*v) / norm) as f32).collect();
        let norm = values
            .iter()
            .map(|v| f64::from(*v).powi(2))
            .sum::<f64>()
            .sqrt();
        debug_assert!((norm - 1.0).abs() < 1e-5, "normalization drifted: {norm}");
        Ok(Self { values, norm })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Cosine similarity, clamped to [-1, 1].
    pub fn cosine(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum();
        (dot / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }
}

pub struct EmbedBatch {
    pub vectors: Vec<Vec<f32>>,
    pub usage: Option<Usage>,
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn model_tag(&self) -> &str;
    /// Identifies provider, model and dimension; recorded in index manifests.
    fn fingerprint(&self) -> String;
    fn embed_batch(&self, texts: &[&str]) -> Result<EmbedBatch, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// Offline token-hash provider ([`HashEmbedder`]).
    DeterministicTest,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dimension: usize,
    pub batch_size: usize,
    pub truncate_chars: usize,
    pub max_retries: u32,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::DeterministicTest,
            dimension: 64,
            batch_size: 64,
            truncate_chars: 8_000,
            max_retries: 3,
            base_url: None,
            model: None,
            max_in_flight: 4,
            timeout_secs: 60,
        }
    }
}

/// Bag-of-tokens test provider.
///
/// Text is lowercased and split on non-alphanumeric characters. Each token is
/// hashed with FNV-1a (64 bit); bucket `h % d` receives `+1` when bit 32 of
/// `h` is clear and `-1` otherwise. If every bucket cancels to zero, unsigned
/// counts are used instead, and text without any alphanumeric token hashes
/// as a single token. The result is L2-normalized by [`Embedding::new`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    tag: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            tag: format!("hash-bow-d{dim}"),
        }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut tokens = Self::tokens(text);
        if tokens.is_empty() {
            tokens.push(text.trim().to_string());
        }
        let mut signed = vec![0f32; self.dim];
        let mut unsigned = vec![0f32; self.dim];
        for t in &tokens {
            let h = fnv1a64(t.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            signed[bucket] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            unsigned[bucket] += 1.0;
        }
        if signed.iter().all(|v| *v == 0.0) {
            unsigned
        } else {
            signed
        }
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn fingerprint(&self) -> String {
        format!("hash-bow-v1:fnv1a64:d{}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<EmbedBatch, EmbedError> {
        Ok(EmbedBatch {
            vectors: texts.iter().map(|t| self.embed_one(t)).collect(),
            usage: None,
        })
    }
}

fn embed_chunk(
    embedder: &dyn Embedder,
    texts: &[&str],
    cfg: &EmbeddingConfig,
) -> Result<(Vec<Embedding>, Vec<CallCharge>), EmbedError> {
    let mut charges = Vec::new();
    let mut attempt = 0;
    let batch = loop {
        match embedder.embed_batch(texts) {
            Ok(batch) => break batch,
            Err(e) if e.retryable() && attempt < cfg.max_retries => {
                attempt += 1;
                charges.push(CallCharge::failed(
                    CostCategory::Embedding,
                    embedder.model_tag(),
                ));
                log::warn!("embedding batch failed (attempt {attempt}): {e}");
            }
            Err(e) => return Err(e),
        }
    };
    if let Some(usage) = batch.usage {
        charges.push(CallCharge::new(
            CostCategory::Embedding,
            embedder.model_tag(),
            usage,
        ));
    }
    if batch.vectors.len() != texts.len() {
        return Err(EmbedError::Count {
            expected: texts.len(),
            got: batch.vectors.len(),
        });
    }
    let expected = embedder.dimension();
    let vectors = batch
        .vectors
        .into_iter()
        .map(|v| {
            if v.len() != expected {
                return Err(EmbedError::Dimension {
                    expected,
                    got: v.len(),
                });
            }
            Embedding::new(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((vectors, charges))
}

/// Embed texts in provider batches, preserving input order.
///
/// Each text is truncated to `cfg.truncate_chars` characters first; empty or
/// whitespace-only texts are reported by position. Transport failures are
/// retried up to `cfg.max_retries` times per batch.
pub fn embed_texts(
    embedder: &dyn Embedder,
    texts: &[&str],
    cfg: &EmbeddingConfig,
) -> Result<(Vec<Embedding>, Vec<CallCharge>), EmbedError> {
    let empty: Vec<usize> = texts
        .iter()
        .enumerate()
        .filter(|(_, t)| t.trim().is_empty())
        .map(|(i, _)| i)
        .collect();
    if !empty.is_empty() {
        return Err(EmbedError::EmptyText(empty));
    }
    let truncated: Vec<&str> = texts
        .iter()
        .map(|t| truncate_chars(t, cfg.truncate_chars))
        .collect();
    let chunks: Vec<_> = truncated
        .par_chunks(cfg.batch_size.max(1))
        .map(|chunk| embed_chunk(embedder, chunk, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut vectors = Vec::with_capacity(texts.len());
    let mut charges = Vec::new();
    for (v, c) in chunks {
        vectors.extend(v);
        charges.extend(c);
    }
    Ok((vectors, charges))
}

/// On-demand paragraph embeddings, cached for the lifetime of a run.
#[derive(Default)]
pub struct EmbeddingCache {
    inner: RwLock<HashMap<ParaIdx, Arc<Embedding>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, para: ParaIdx) -> Option<Arc<Embedding>> {
        self.inner.read().expect("cache lock").get(&para).cloned()
    }

    /// Embeddings for `paras`, computing the missing ones.
    pub fn get_many(
        &self,
        corpus: &Corpus,
        paras: &[ParaIdx],
        embedder: &dyn Embedder,
        cfg: &EmbeddingConfig,
    ) -> Result<(Vec<Arc<Embedding>>, Vec<CallCharge>), EmbedError> {
        let mut missing: Vec<ParaIdx> = {
            let map = self.inner.read().expect("cache lock");
            paras
                .iter()
                .copied()
                .filter(|p| !map.contains_key(p))
                .collect()
        };
        missing.sort_unstable();
        missing.dedup();
        let mut charges = Vec::new();
        if !missing.is_empty() {
            let texts: Vec<&str> = missing
                .iter()
                .map(|p| corpus.paragraph(*p).text.as_str())
                .collect();
            let (vectors, c) = embed_texts(embedder, &texts, cfg)?;
            charges = c;
            let mut map = self.inner.write().expect("cache lock");
            for (p, v) in missing.into_iter().zip(vectors) {
                map.insert(p, Arc::new(v));
            }
        }
        let map = self.inner.read().expect("cache lock");
        let out = paras.iter().map(|p| Arc::clone(&map[p])).collect();
        Ok((out, charges))
    }
}
