//! The embedder `M(·)` behind query and reference relevance.
//!
//! Two implementations share the [`Embedder`] trait: a deterministic
//! feature-hashing embedder that needs no model files, and a blocking HTTP
//! client for an external embedding bridge speaking the `/v1/embed` protocol.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

pub const DEFAULT_DIM: usize = 1024;

/// Texts per HTTP request for the remote embedder.
pub const DEFAULT_REMOTE_BATCH: usize = 64;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Dense embedding of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding entry {i} is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// L2-normalizes in place; the zero vector stays zero.
    pub fn normalize(&mut self) {
        let norm = self.l2_norm();
        if norm > 0.0 {
            for v in &mut self.values {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
}

/// How two embeddings are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Raw inner product.
    #[default]
    InnerProduct,
    /// Inner product after re-normalizing both sides; kept for ablations only.
    Cosine,
}

/// Inner product `a · b`, accumulated in `f64`.
pub fn relevance_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum())
}

pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector, kind: Similarity) -> Result<f64> {
    let dot = relevance_score(a, b)?;
    Ok(match kind {
        Similarity::InnerProduct => dot,
        Similarity::Cosine => {
            let denom = a.l2_norm() * b.l2_norm();
            if denom == 0.0 {
                0.0
            } else {
                dot / denom
            }
        }
    })
}

/// Anything that can embed a batch of texts into fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per input, order preserved.
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed(&[text])?;
        out.pop()
            .ok_or_else(|| Error::InvalidInput("embedder returned no vector".into()))
    }
}

impl std::fmt::Debug for dyn Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Embedder(dim={})", self.dim())
    }
}

/// Nonnegative `f64` to `f32`, rounding upward so that a normalized vector's
/// self inner product is never below 1.
fn round_up_f32(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) < x {
        f.next_up()
    } else {
        f
    }
}

/// Hashed unigram + bigram bag of words.
///
/// Unigram features are `"1:" + word`, bigram features `"2:" + w1 + " " + w2`.
/// Each feature adds 1.0 at `fnv1a64(feature) % dim`; the result is
/// L2-normalized (when enabled) and the empty text maps to the zero vector.
/// Normalized components are rounded up to `f32`, so `v · v >= 1`.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    normalize: bool,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::with_normalize(dim, true)
    }

    pub fn with_normalize(dim: usize, normalize: bool) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, normalize }
    }

    /// Feature strings in emission order.
    pub fn features(text: &str) -> Vec<String> {
        let words = text::words(text);
        let mut feats = Vec::with_capacity(words.len() * 2);
        for w in &words {
            feats.push(format!("1:{w}"));
        }
        for pair in words.windows(2) {
            feats.push(format!("2:{} {}", pair[0], pair[1]));
        }
        feats
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0f64; self.dim];
        for feat in Self::features(text) {
            let idx = (fnv1a64(feat.as_bytes()) % self.dim as u64) as usize;
            acc[idx] += 1.0;
        }
        let norm = if self.normalize {
            acc.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            1.0
        };
        let values = if norm > 0.0 {
            acc.iter().map(|v| round_up_f32(v / norm)).collect()
        } else {
            vec![0.0; self.dim]
        };
        EmbeddingVector { values }
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

/// Client for an external embedding bridge (`POST {endpoint}/v1/embed`).
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    normalize: bool,
    batch_size: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize, normalize: bool) -> Result<Self> {
        let endpoint = endpoint.into().trim_end_matches('/').to_owned();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Config {
                field: "embedder.endpoint".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint,
            dim,
            normalize,
            batch_size: DEFAULT_REMOTE_BATCH,
            client,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn embed_batch(&self, texts: &[&str], batch_index: usize) -> Result<Vec<EmbeddingVector>> {
        let transport = |message: String| Error::EmbedTransport {
            endpoint: self.endpoint.clone(),
            batch_index,
            message,
        };
        let resp = self
            .client
            .post(format!("{}/v1/embed", self.endpoint))
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(transport(format!("HTTP {status}: {body}")));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| transport(format!("malformed response: {e}")))?;
        if body.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: body.dim,
            });
        }
        if body.vectors.len() != texts.len() {
            return Err(transport(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|values| {
                if values.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: values.len(),
                    });
                }
                let mut v = EmbeddingVector::new(values)?;
                if self.normalize {
                    v.normalize();
                }
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for (i, chunk) in texts.chunks(self.batch_size).enumerate() {
            out.extend(self.embed_batch(chunk, i)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    BuiltinHashed,
    Remote,
}

/// Configuration from which an embedder is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub normalize: bool,
}

impl Default for EmbedderDescriptor {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::BuiltinHashed,
            dim: DEFAULT_DIM,
            endpoint: None,
            normalize: true,
        }
    }
}

impl EmbedderDescriptor {
    pub fn remote(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: EmbedderKind::Remote,
            dim,
            endpoint: Some(endpoint.into()),
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config {
                field: "embedder.dim".into(),
                message: "must be positive".into(),
            });
        }
        if self.kind == EmbedderKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config {
                field: "embedder.endpoint".into(),
                message: "required for the remote embedder".into(),
            });
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::BuiltinHashed => {
                Arc::new(HashedEmbedder::with_normalize(self.dim, self.normalize))
            }
            EmbedderKind::Remote => {
                let endpoint = self.endpoint.clone().unwrap_or_default();
                Arc::new(RemoteEmbedder::new(endpoint, self.dim, self.normalize)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn builtin_embed_contract() {
        let e = HashedEmbedder::default();
        let v = e.embed_one("hello world").unwrap();
        assert_eq!(v.dim(), 1024);
        assert!((v.l2_norm() - 1.0).abs() < 1e-6);

        let z = e.embed_one("").unwrap();
        assert!(z.is_zero());

        let pair = e.embed(&["alpha beta", "alpha beta"]).unwrap();
        assert_eq!(pair[0], pair[1]);
    }

    #[test]
    fn features_follow_prefix_scheme() {
        assert_eq!(
            HashedEmbedder::features("Alpha, beta gamma"),
            vec![
                "1:alpha",
                "1:beta",
                "1:gamma",
                "2:alpha beta",
                "2:beta gamma"
            ]
        );
    }

    #[test]
    fn relevance_examples() {
        let e = HashedEmbedder::default();
        let v = e.embed_one("some text here").unwrap();
        let self_score = relevance_score(&v, &v).unwrap();
        assert!((1.0..1.0 + 1e-6).contains(&self_score));
        let z = EmbeddingVector::zeros(1024);
        assert_eq!(relevance_score(&v, &z).unwrap(), 0.0);

        let q = e.embed_one("tell me about gandhi").unwrap();
        let on = e.embed_one("gandhi was a leader").unwrap();
        let off = e.embed_one("the recipe needs flour").unwrap();
        assert!(relevance_score(&q, &on).unwrap() > relevance_score(&q, &off).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = EmbeddingVector::zeros(4);
        let b = EmbeddingVector::zeros(5);
        let err = relevance_score(&a, &b).unwrap_err();
        assert_eq!(err.code(), "DIMENSION_MISMATCH");
    }

    #[test]
    fn cosine_renormalizes() {
        let a = EmbeddingVector::new(vec![2.0, 0.0]).unwrap();
        let b = EmbeddingVector::new(vec![3.0, 0.0]).unwrap();
        assert_eq!(similarity(&a, &b, Similarity::InnerProduct).unwrap(), 6.0);
        assert_eq!(similarity(&a, &b, Similarity::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = EmbedderDescriptor::default();
        assert!(d.validate().is_ok());
        d.kind = EmbedderKind::Remote;
        assert_eq!(d.validate().unwrap_err().code(), "CONFIG");
    }

    #[test]
    fn non_finite_vectors_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN]).is_err());
    }
}
