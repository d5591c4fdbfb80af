//! Text embeddings for dense tool retrieval.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{HttpTransport, UreqTransport};

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("cannot embed text with no alphanumeric tokens")]
    EmptyText,
    #[error("embedding provider error: {0}")]
    Provider(String),
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    /// Unit-norm vector of length [`dimension`](Self::dimension).
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Hashed bag-of-words: each token's FNV-1a hash picks a bucket, bucket
/// counts are L2-normalized. Deterministic and offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: DEFAULT_DIMENSION }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0f64; self.dimension];
        for t in &tokens {
            counts[self.bucket(t)] += 1.0;
        }
        Ok(normalize(&counts))
    }
}

/// L2-normalizes in f64 before narrowing.
pub fn normalize(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

/// Cosine similarity, 0 when either side is the zero vector or lengths differ.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    url: String,
    api_key: Option<String>,
    model: String,
    dimension: usize,
    transport: Arc<dyn HttpTransport>,
}

impl HttpEmbedder {
    pub fn new(api_base: &str, api_key: Option<String>, model: impl Into<String>, dimension: usize) -> Self {
        Self {
            url: format!("{}/embeddings", api_base.trim_end_matches('/')),
            api_key,
            model: model.into(),
            dimension,
            transport: Arc::new(UreqTransport),
        }
    }

    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = transport;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        if tokenize(text).is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut headers = Vec::new();
        if let Some(k) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {k}")));
        }
        let body = json!({"model": self.model, "input": text}).to_string();
        let resp = self
            .transport
            .post_json(&self.url, &headers, &body, Duration::from_secs(30))
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !resp.is_success() {
            return Err(EmbedError::Provider(format!("status {}", resp.status)));
        }
        let v: Value = serde_json::from_str(&resp.body).map_err(|e| EmbedError::Provider(e.to_string()))?;
        let raw: Vec<f64> = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Provider("response has no embedding".into()))?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        if raw.len() != self.dimension {
            return Err(EmbedError::Provider(format!("expected {} dims, got {}", self.dimension, raw.len())));
        }
        if raw.iter().all(|x| *x == 0.0) {
            return Err(EmbedError::Provider("zero embedding".into()));
        }
        Ok(normalize(&raw))
    }
}
