use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::text::{fnv1a64, tokenize};

/// Matches the dimensionality of common small sentence embedders.
pub const DEFAULT_EMBED_DIM: usize = 384;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of a non-empty text.
    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, MetricsError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>, MetricsError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(MetricsError::Degenerate(format!("zero-norm embedding for {what:?}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Signed feature hashing of normalized tokens. Bag-of-tokens: token order
/// has no effect on the vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(MetricsError::Empty("text to embed"));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            let h = fnv1a64(t.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        normalize(v, text)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an embedding service: `POST {texts: [...]}` returning `{vectors: [[...]]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self, MetricsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| MetricsError::Unavailable(e.to_string()))?;
        Ok(Self { url: url.into(), dim, client })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        Ok(v.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, MetricsError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(MetricsError::Empty("text to embed"));
        }
        let resp: EmbedResponse = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| MetricsError::Unavailable(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(MetricsError::Unavailable(format!(
                "embedding service returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        resp.vectors
            .into_iter()
            .zip(texts)
            .map(|(v, t)| {
                if v.len() != self.dim {
                    return Err(MetricsError::DimMismatch { expected: self.dim, got: v.len() });
                }
                normalize(v, t)
            })
            .collect()
    }
}
