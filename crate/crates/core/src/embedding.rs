//! Dense text vectors and the similarity primitives used by retrieval,
//! knowledge-graph matching and gating.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense, finite, non-empty vector.
///
/// The zero vector is a legal value (it is what an embedder returns for empty
/// text) but cannot be normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>", bound = "T: Scalar")]
pub struct Vector<T> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("vector must have dim > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector component {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![T::zero(); dim])
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| v * c).collect())
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for Vector<T> {
    type Error = Error;

    fn try_from(values: Vec<T>) -> Result<Self> {
        Self::new(values)
    }
}

impl<T> From<Vector<T>> for Vec<T> {
    fn from(v: Vector<T>) -> Self {
        v.values
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity. Returns 0 when either side is the zero vector so that
/// empty documents rank last instead of failing a batch.
pub fn cosine<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T> {
    check_dim(a.dim(), b.dim())?;
    Ok(cosine_slices(&a.values, &b.values))
}

pub(crate) fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    let denom = norm(a) * norm(b);
    if denom.is_zero() {
        return T::zero();
    }
    let c = dot(a, b) / denom;
    // rounding can push |c| a hair past 1
    c.max(-T::one()).min(T::one())
}

pub fn normalize<T: Scalar>(v: &Vector<T>) -> Result<Vector<T>> {
    let n = v.norm();
    if n.is_zero() {
        return Err(Error::ZeroNorm);
    }
    Vector::new(v.values.iter().map(|&x| x / n).collect())
}

/// Anything that turns text into a fixed-dimension [`Vector`].
pub trait Embedder<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, text: &str) -> Result<Vector<T>>;
}

pub fn embed<T: Scalar, E: Embedder<T> + ?Sized>(text: &str, embedder: &E) -> Result<Vector<T>> {
    let v = embedder.embed(text)?;
    check_dim(embedder.dim(), v.dim())?;
    Ok(v)
}

pub const DEFAULT_EMBED_DIM: usize = 256;

/// Hashed character n-gram embedder.
///
/// Text is lowercased and whitespace-collapsed, framed with start/end markers,
/// and every character n-gram is hashed (seeded FNV-1a) into one of `dim`
/// buckets. Counts are unsigned, so any nonempty text yields a nonzero vector,
/// which is then normalized to unit length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub order: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            order: 3,
            seed: 0x5eed,
        }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, order: usize, seed: u64) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::Configuration(
                "hash embedder needs dim > 0 and order > 0".into(),
            ));
        }
        Ok(Self { dim, order, seed })
    }

    fn bucket(&self, gram: &[char]) -> usize {
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(FNV_PRIME);
        for c in gram {
            for b in (*c as u32).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        }
        (h % self.dim as u64) as usize
    }
}

impl<T: Scalar> Embedder<T> for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, text: &str) -> Result<Vector<T>> {
        let mut counts = vec![0u32; self.dim];
        if !text.is_empty() {
            let folded = text.split_whitespace().collect::<Vec<_>>().join(" ");
            let mut chars = Vec::with_capacity(folded.len() + 2);
            chars.push('\u{2}');
            chars.extend(folded.chars().flat_map(char::to_lowercase));
            chars.push('\u{3}');
            let n = self.order.min(chars.len());
            for gram in chars.windows(n) {
                counts[self.bucket(gram)] += 1;
            }
        }
        let values: Vec<T> = counts.iter().map(|&c| T::lit(f64::from(c))).collect();
        let v = Vector::new(values)?;
        if v.is_zero() {
            Ok(v)
        } else {
            normalize(&v)
        }
    }
}

/// Adapter for an external embedding service reached over HTTP.
///
/// Request body `{"text": ...}`; the response must be `{"vector": [...]}` of
/// exactly `dim` entries. Transport failures and timeouts are reported as
/// [`Error::BackendUnreachable`]; no partial or fallback vector is produced.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    name: String,
    endpoint: String,
    dim: usize,
    timeout: Duration,
}

impl HttpEmbedder {
    pub fn new(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        dim: usize,
        timeout: Duration,
    ) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            dim,
            timeout,
        }
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl<T: Scalar> Embedder<T> for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn embed(&self, text: &str) -> Result<Vector<T>> {
        let body: EmbedResponse = crate::http::post_json(
            &self.endpoint,
            self.timeout,
            &serde_json::json!({ "text": text }),
        )?;
        check_dim(self.dim, body.vector.len())?;
        Vector::from_f64(&body.vector)
    }
}
