//! Text embeddings and cosine similarity.
//!
//! Backends implement [`Embedder`]; callers go through [`embed_batch`], which
//! enforces the batch contract (one non-zero vector per text, shared
//! dimension) regardless of what the backend returns.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{EmbedError, SimilarityError};
use crate::http::{token_from_env, JsonEndpoint};
use crate::retry::RetryPolicy;

/// A non-zero embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// `None` for empty, non-finite, or all-zero vectors.
    pub fn new(v: Vec<f64>) -> Option<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) || v.iter().all(|x| *x == 0.0) {
            return None;
        }
        Some(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Batch text embedder.
///
/// The same text must map to the same vector for the lifetime of one
/// instance.
pub trait Embedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;

    /// Backends that cannot take concurrent calls return true; the pipeline
    /// then serializes access.
    fn single_flight(&self) -> bool {
        false
    }

    fn kind(&self) -> &'static str;
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_texts(texts)
    }
    fn single_flight(&self) -> bool {
        (**self).single_flight()
    }
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
}

/// Embed `texts` in order, validating the backend's answer.
pub fn embed_batch(backend: &dyn Embedder, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyBatch);
    }
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText { index });
    }
    let raw = backend.embed_texts(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbedError::CountMismatch {
            expected: texts.len(),
            got: raw.len(),
        });
    }
    let dim = raw[0].len();
    raw.into_iter()
        .enumerate()
        .map(|(index, v)| {
            if v.len() != dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Embedding::new(v).ok_or(EmbedError::ZeroVector { index })
        })
        .collect()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Evaluation order is symmetric so `cosine(a, b) == cosine(b, a)` bit for bit.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Deterministic offline embedder: signed feature hashing of character
/// trigrams into a fixed number of buckets.
///
/// Near-identical texts land close together, unrelated texts near zero.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
}

pub const MOCK_DIM: usize = 64;
const NGRAM: usize = 3;

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            dim: MOCK_DIM,
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let norm: Vec<char> = format!(
            " {} ",
            text.to_lowercase()
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        )
        .chars()
        .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 4 * NGRAM];
        for gram in norm.windows(NGRAM) {
            let mut len = 0;
            for ch in gram {
                len += ch.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(self.seed, &buf[..len]);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            let h = fnv1a(self.seed, text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(0)
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so the sign bit is well mixed
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

impl Embedder for MockEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn kind(&self) -> &'static str {
        "mock"
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Remote embedder: POST `{"texts": [...]}` → `{"embeddings": [[...], ...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: JsonEndpoint,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn new(
        url: &str,
        auth_env: Option<&str>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        let token = token_from_env(auth_env).map_err(EmbedError::Config)?;
        Ok(Self {
            endpoint: JsonEndpoint::new(url, token, timeout),
            retry,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        self.retry.run(EmbedError::is_retryable, |_| {
            self.endpoint
                .post::<_, EmbedResponse>(&EmbedRequest { texts })
                .map(|r| r.embeddings)
                .map_err(|f| {
                    if f.retryable {
                        EmbedError::Transport(f.message)
                    } else {
                        EmbedError::Config(f.message)
                    }
                })
        })
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}

/// Memoizes another backend on exact text bytes.
pub struct CachingEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> CachingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<E: Embedder> Embedder for CachingEmbedder<E> {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_texts(&missing)?;
            if fresh.len() != missing.len() {
                return Err(EmbedError::CountMismatch {
                    expected: missing.len(),
                    got: fresh.len(),
                });
            }
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t, v);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn single_flight(&self) -> bool {
        self.inner.single_flight()
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
}
