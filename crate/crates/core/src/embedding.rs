//! Dense embeddings: the vector type, cosine similarity, an offline hashing
//! embedder and an HTTP client for OpenAI-style `/embeddings` servers.

use std::hash::Hasher;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use fnv::FnvHasher;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::text::tokenize;

pub const DEFAULT_DIMENSION: usize = 1024;
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding model mismatch: index built with '{index}', query uses '{query}'")]
    ModelMismatch { index: String, query: String },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding request has no input texts")]
    EmptyBatch,
    #[error("embedding service failed after {attempts} attempt(s): {message}")]
    Remote {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub model_id: String,
}

impl Embedding {
    /// Builds a unit-norm embedding. Zero vectors stay zero.
    pub fn normalized(mut values: Vec<f32>, model_id: impl Into<String>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(Embedding {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Dot product with f64 accumulation. Equals cosine for unit vectors.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

pub const HASH_MODEL_ID: &str = "hash-ngram-v1";

/// Feature-hashing embedder over lowercased word unigrams and bigrams.
///
/// Each feature lands in `FNV(feature) mod dim` with a sign taken from the
/// hash's top bit. Text with no word tokens maps to the first basis vector so
/// the result is always unit norm.
pub fn hash_embed(text: &str, dim: usize) -> Embedding {
    assert!(dim >= 2, "hash_embed needs at least two dimensions");
    let words: Vec<String> = tokenize(text)
        .into_iter()
        .filter(|t| t.is_word())
        .map(|t| t.text.to_lowercase())
        .collect();
    let mut values = vec![0f32; dim];
    let mut add = |feature: &str| {
        let mut h = FnvHasher::default();
        h.write(feature.as_bytes());
        let h = h.finish();
        let bucket = (h % dim as u64) as usize;
        values[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for w in &words {
        add(w);
    }
    for pair in words.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    if values.iter().all(|&v| v == 0.0) {
        values[0] = 1.0;
    }
    Embedding::normalized(values, HASH_MODEL_ID).expect("hash features are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Document,
    Query,
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// One unit-norm embedding per input, in input order.
    async fn embed(&self, texts: &[String], purpose: Purpose) -> Result<Vec<Embedding>, EmbedError>;
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }
}

#[async_trait]
impl Embedder for HashEmbedder {
    fn model_id(&self) -> &str {
        HASH_MODEL_ID
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    async fn embed(&self, texts: &[String], _purpose: Purpose) -> Result<Vec<Embedding>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        Ok(texts.iter().map(|t| hash_embed(t, self.dim)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpEmbedderConfig {
    pub url: String,
    pub model: String,
    pub dimension: usize,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    /// Prepended to document texts (E5-style models expect "passage: ").
    pub document_prefix: String,
    /// Prepended to query texts (E5-style models expect "query: ").
    pub query_prefix: String,
}

impl Default for HttpEmbedderConfig {
    fn default() -> Self {
        HttpEmbedderConfig {
            url: "http://127.0.0.1:8081/v1/embeddings".into(),
            model: "e5-large-v2".into(),
            dimension: DEFAULT_DIMENSION,
            batch_size: 32,
            timeout_ms: 30_000,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_ms: 250,
            document_prefix: String::new(),
            query_prefix: String::new(),
        }
    }
}

#[derive(Debug, Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    client: reqwest::Client,
    in_flight: Arc<Semaphore>,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .expect("reqwest client without TLS builds");
        let in_flight = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        HttpEmbedder {
            config,
            client,
            in_flight,
        }
    }

    async fn embed_batch(&self, batch: Vec<String>) -> Result<Vec<Embedding>, EmbedError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let attempts = self.config.max_attempts.max(1);
        let mut last = (None, String::new());
        for attempt in 1..=attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_ms << (attempt - 2);
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            let resp = self
                .client
                .post(&self.config.url)
                .json(&EmbeddingRequest {
                    model: &self.config.model,
                    input: &batch,
                })
                .send()
                .await;
            let resp = match resp {
                Ok(r) => r,
                Err(e) => {
                    last = (None, e.to_string());
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() {
                last = (Some(status.as_u16()), format!("server returned {status}"));
                continue;
            }
            if !status.is_success() {
                return Err(EmbedError::Remote {
                    attempts: attempt,
                    status: Some(status.as_u16()),
                    message: resp.text().await.unwrap_or_default(),
                });
            }
            let body: EmbeddingResponse = resp.json().await.map_err(|e| EmbedError::Protocol(e.to_string()))?;
            return self.collect(body, batch.len());
        }
        Err(EmbedError::Remote {
            attempts,
            status: last.0,
            message: last.1,
        })
    }

    fn collect(&self, body: EmbeddingResponse, expected: usize) -> Result<Vec<Embedding>, EmbedError> {
        if body.data.len() != expected {
            return Err(EmbedError::Protocol(format!(
                "expected {expected} embeddings, got {}",
                body.data.len()
            )));
        }
        let mut slots: Vec<Option<Embedding>> = vec![None; expected];
        for datum in body.data {
            if datum.embedding.len() != self.config.dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.config.dimension,
                    actual: datum.embedding.len(),
                });
            }
            let slot = slots
                .get_mut(datum.index)
                .ok_or_else(|| EmbedError::Protocol(format!("index {} out of range", datum.index)))?;
            *slot = Some(Embedding::normalized(datum.embedding, self.config.model.clone())?);
        }
        slots
            .into_iter()
            .map(|s| s.ok_or_else(|| EmbedError::Protocol("missing index in response".into())))
            .collect()
    }
}

#[async_trait]
impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    async fn embed(&self, texts: &[String], purpose: Purpose) -> Result<Vec<Embedding>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let prefix = match purpose {
            Purpose::Document => &self.config.document_prefix,
            Purpose::Query => &self.config.query_prefix,
        };
        let inputs: Vec<String> = texts.iter().map(|t| format!("{prefix}{t}")).collect();
        let batches: Vec<Vec<String>> = inputs
            .chunks(self.config.batch_size.max(1))
            .map(<[String]>::to_vec)
            .collect();
        let per_batch: Vec<Vec<Embedding>> = stream::iter(batches)
            .map(|b| self.embed_batch(b))
            .buffered(self.config.max_in_flight.max(1))
            .try_collect()
            .await?;
        Ok(per_batch.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_fixtures() {
        assert!((cosine(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.6, 0.8], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-7);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hash_embed_is_deterministic_and_unit() {
        assert_eq!(hash_embed("x", 8), hash_embed("x", 8));
        for t in ["", "insulin drip", "Na+ 135", "a b c d e f g"] {
            assert!((hash_embed(t, 64).norm() - 1.0).abs() < NORM_TOLERANCE);
        }
    }

    /// Oracle: count shared unigram+bigram features directly.
    fn shared_features(a: &str, b: &str) -> usize {
        let feats = |s: &str| {
            let w: Vec<String> = crate::text::terms(s).collect();
            let mut f: Vec<String> = w.clone();
            f.extend(w.windows(2).map(|p| format!("{} {}", p[0], p[1])));
            f
        };
        let fb = feats(b);
        feats(a).into_iter().filter(|x| fb.contains(x)).count()
    }

    #[test]
    fn shared_ngrams_raise_similarity() {
        let q = "diabetic ketoacidosis";
        let near = "diabetic ketoacidosis protocol";
        let far = "parking policy";
        assert_eq!(shared_features(q, near), 3);
        assert_eq!(shared_features(q, far), 0);
        let d = 256;
        let c_near = cosine(&hash_embed(q, d).values, &hash_embed(near, d).values).unwrap();
        let c_far = cosine(&hash_embed(q, d).values, &hash_embed(far, d).values).unwrap();
        assert!(c_near > c_far, "{c_near} vs {c_far}");
    }

    proptest::proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f32..10.0, 1..32),
            seed in proptest::collection::vec(-10.0f32..10.0, 32),
        ) {
            let b = &seed[..a.len()];
            let ab = cosine(&a, b).unwrap();
            let ba = cosine(b, &a).unwrap();
            proptest::prop_assert_eq!(ab, ba);
            proptest::prop_assert!(ab.abs() <= 1.0);
        }

        #[test]
        fn hash_embed_unit_norm(t in "\\PC{0,60}", d in 2usize..300) {
            let e = hash_embed(&t, d);
            proptest::prop_assert_eq!(e.dim(), d);
            proptest::prop_assert!((e.norm() - 1.0).abs() < NORM_TOLERANCE);
        }
    }
}
