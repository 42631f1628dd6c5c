//! Text embedding providers and cosine similarity.
//!
//! Three providers implement [`Embedder`]:
//!
//! - [`LocalHashEmbedder`]: character n-grams of the lowercased, NFC-composed
//!   text are hashed with 64-bit FNV-1a (offset basis `0xcbf29ce484222325`,
//!   prime `0x100000001b3`) into `dimension` count buckets, then
//!   L2-normalized. Deterministic and model-free.
//! - [`RemoteEmbedder`]: HTTP client for an embedding service speaking
//!   `POST {model, texts} -> {vectors}`.
//! - [`OneHotEmbedder`]: assigns every distinct normalized text its own basis
//!   vector. Useful in tests where "same text" must mean similarity 1 and
//!   anything else 0.
//!
//! [`CachedEmbedder`] wraps any provider with an LRU cache that coalesces
//! concurrent requests for the same key.

use std::collections::HashMap;
use std::hash::Hasher;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use fnv::FnvHasher;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::remote::{self, PostError};

pub const EMBEDDER_API_KEY_ENV: &str = "EMBEDDER_API_KEY";
pub const EMBEDDER_ENDPOINT_ENV: &str = "EMBEDDER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding service transport failure: {0}")]
    Transport(String),
    #[error("embedding service protocol violation: {0}")]
    Protocol(String),
    #[error("one-hot vocabulary exhausted at {0} entries")]
    VocabularyExhausted(usize),
    #[error("invalid embedder configuration: {0}")]
    Config(String),
}

impl From<PostError> for EmbeddingError {
    fn from(e: PostError) -> Self {
        match e {
            PostError::Transport(m) => EmbeddingError::Transport(m),
            other => EmbeddingError::Protocol(other.to_string()),
        }
    }
}

/// Dense embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    /// Scale to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two raw slices, clamped into `[-1, 1]` to absorb
/// rounding.
pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (l2(u), l2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_slices(&u.values, &v.values)
}

/// Identifies which model produced a vector; recorded in report provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub provider: String,
    pub model: String,
    pub dimension: Option<usize>,
}

pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> EmbedderDescriptor;

    /// Embed every text; output order follows input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| EmbeddingError::Protocol("provider returned no vector".into()))
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn descriptor(&self) -> EmbedderDescriptor {
        (**self).descriptor()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn descriptor(&self) -> EmbedderDescriptor {
        (**self).descriptor()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }
}

/// Lowercase, NFC-compose and collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let composed: String = lowered.nfc().collect();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(s.as_bytes());
    hasher.finish()
}

/// Hashed character n-gram embedder.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dimension: usize,
    ngram_size: usize,
}

impl LocalHashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;
    pub const DEFAULT_NGRAM: usize = 3;

    pub fn new(dimension: usize, ngram_size: usize) -> Result<Self, EmbeddingError> {
        if dimension < 2 {
            return Err(EmbeddingError::Config(format!(
                "dimension must be at least 2, got {dimension}"
            )));
        }
        if ngram_size == 0 {
            return Err(EmbeddingError::Config("ngram_size must be positive".into()));
        }
        Ok(LocalHashEmbedder {
            dimension,
            ngram_size,
        })
    }

    /// Character n-grams of the normalized text. Texts shorter than `n`
    /// characters yield the whole text as a single gram.
    pub fn ngrams(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = normalize_text(text).chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() <= self.ngram_size {
            return vec![chars.into_iter().collect()];
        }
        chars
            .windows(self.ngram_size)
            .map(|w| w.iter().collect())
            .collect()
    }

    /// Un-normalized bucket counts.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; self.dimension];
        for gram in self.ngrams(text) {
            counts[(fnv1a64(&gram) % self.dimension as u64) as usize] += 1.0;
        }
        counts
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        EmbeddingVector::normalized(self.counts(text))
    }
}

impl Default for LocalHashEmbedder {
    fn default() -> Self {
        LocalHashEmbedder {
            dimension: Self::DEFAULT_DIMENSION,
            ngram_size: Self::DEFAULT_NGRAM,
        }
    }
}

impl Embedder for LocalHashEmbedder {
    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            provider: "local-hash".into(),
            model: format!("fnv1a64-char{}gram", self.ngram_size),
            dimension: Some(self.dimension),
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// One basis vector per distinct normalized text, assigned in first-seen
/// order.
#[derive(Debug)]
pub struct OneHotEmbedder {
    capacity: usize,
    vocab: Mutex<HashMap<String, usize>>,
}

impl OneHotEmbedder {
    pub fn new(capacity: usize) -> Self {
        OneHotEmbedder {
            capacity,
            vocab: Mutex::new(HashMap::new()),
        }
    }
}

impl Embedder for OneHotEmbedder {
    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            provider: "one-hot".into(),
            model: "vocabulary".into(),
            dimension: Some(self.capacity),
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut vocab = self.vocab.lock().unwrap();
        texts
            .iter()
            .map(|text| {
                let key = normalize_text(text);
                if key.is_empty() {
                    return Err(EmbeddingError::EmptyText);
                }
                let next = vocab.len();
                let index = *vocab.entry(key).or_insert(next);
                if index >= self.capacity {
                    return Err(EmbeddingError::VocabularyExhausted(self.capacity));
                }
                let mut values = vec![0.0; self.capacity];
                values[index] = 1.0;
                Ok(EmbeddingVector::new(values))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a remote embedding service.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: Option<usize>,
    batch_size: usize,
    max_retries: u32,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: Option<usize>,
        batch_size: usize,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self, EmbeddingError> {
        let client = remote::build_client(timeout).map_err(EmbeddingError::Config)?;
        Ok(RemoteEmbedder {
            client,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dimension,
            batch_size: batch_size.max(1),
            max_retries,
        })
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let body = EmbedRequest {
            model: &self.model,
            texts,
        };
        let value = remote::post_json(
            &self.client,
            &self.endpoint,
            self.api_key.as_deref(),
            &body,
            self.max_retries,
        )?;
        let resp: EmbedResponse = serde_json::from_value(value)
            .map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbeddingError::Protocol(format!(
                "requested {} vectors, received {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        let expected = self.dimension.unwrap_or(resp.vectors[0].len());
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != expected {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected,
                        found: v.len(),
                    });
                }
                EmbeddingVector::normalized(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            provider: "remote".into(),
            model: self.model.clone(),
            dimension: self.dimension,
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.fetch(chunk)?);
        }
        Ok(out)
    }
}

type CacheKey = (String, String, String);
type Outcome = Result<EmbeddingVector, EmbeddingError>;

#[derive(Default)]
struct Pending {
    slot: Mutex<Option<Outcome>>,
    ready: Condvar,
}

impl Pending {
    fn publish(&self, outcome: Outcome) {
        *self.slot.lock().unwrap() = Some(outcome);
        self.ready.notify_all();
    }

    fn wait(&self) -> Outcome {
        let mut slot = self.slot.lock().unwrap();
        while slot.is_none() {
            slot = self.ready.wait(slot).unwrap();
        }
        slot.clone().unwrap()
    }
}

struct CacheState {
    entries: LruCache<CacheKey, EmbeddingVector>,
    in_flight: HashMap<CacheKey, Arc<Pending>>,
}

/// LRU cache keyed by (provider, model, text).
///
/// Each key is fetched from the wrapped provider at most once while it stays
/// cached: concurrent callers asking for a key that is already being fetched
/// wait for that fetch instead of issuing their own. Failed fetches are not
/// cached.
pub struct CachedEmbedder<E> {
    inner: E,
    provider: String,
    model: String,
    state: Mutex<CacheState>,
    fetched: AtomicUsize,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, capacity: NonZeroUsize) -> Self {
        let desc = inner.descriptor();
        CachedEmbedder {
            inner,
            provider: desc.provider,
            model: desc.model,
            state: Mutex::new(CacheState {
                entries: LruCache::new(capacity),
                in_flight: HashMap::new(),
            }),
            fetched: AtomicUsize::new(0),
        }
    }

    /// Number of texts forwarded to the wrapped provider so far.
    pub fn fetch_count(&self) -> usize {
        self.fetched.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn key(&self, text: &str) -> CacheKey {
        (self.provider.clone(), self.model.clone(), text.to_owned())
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn descriptor(&self) -> EmbedderDescriptor {
        self.inner.descriptor()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut waits: Vec<(usize, Arc<Pending>)> = Vec::new();
        let mut owned: Vec<(CacheKey, Arc<Pending>)> = Vec::new();
        {
            let mut state = self.state.lock().unwrap();
            for (i, text) in texts.iter().enumerate() {
                let key = self.key(text);
                if let Some(v) = state.entries.get(&key) {
                    out[i] = Some(v.clone());
                } else if let Some(p) = state.in_flight.get(&key) {
                    waits.push((i, Arc::clone(p)));
                } else {
                    let p = Arc::new(Pending::default());
                    state.in_flight.insert(key.clone(), Arc::clone(&p));
                    owned.push((key, Arc::clone(&p)));
                    waits.push((i, p));
                }
            }
        }

        if !owned.is_empty() {
            let batch: Vec<&str> = owned.iter().map(|(k, _)| k.2.as_str()).collect();
            self.fetched.fetch_add(batch.len(), Ordering::SeqCst);
            let result = self.inner.embed_batch(&batch);
            let mut state = self.state.lock().unwrap();
            match result {
                Ok(vectors) if vectors.len() == owned.len() => {
                    for ((key, pending), v) in owned.into_iter().zip(vectors) {
                        state.in_flight.remove(&key);
                        state.entries.put(key, v.clone());
                        pending.publish(Ok(v));
                    }
                }
                Ok(vectors) => {
                    let err = EmbeddingError::Protocol(format!(
                        "requested {} vectors, received {}",
                        owned.len(),
                        vectors.len()
                    ));
                    for (key, pending) in owned {
                        state.in_flight.remove(&key);
                        pending.publish(Err(err.clone()));
                    }
                }
                Err(err) => {
                    for (key, pending) in owned {
                        state.in_flight.remove(&key);
                        pending.publish(Err(err.clone()));
                    }
                }
            }
        }

        for (i, pending) in waits {
            out[i] = Some(pending.wait()?);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderProvider {
    Remote,
    LocalHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub provider: EmbedderProvider,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub dimension: Option<usize>,
    pub ngram_size: usize,
    pub cache_capacity: usize,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            provider: EmbedderProvider::LocalHash,
            endpoint: None,
            model_name: None,
            dimension: Some(LocalHashEmbedder::DEFAULT_DIMENSION),
            ngram_size: LocalHashEmbedder::DEFAULT_NGRAM,
            cache_capacity: 4096,
            batch_size: 64,
            timeout_secs: 30,
            max_retries: 2,
        }
    }
}

impl EmbedderConfig {
    /// Instantiate the configured provider, wrapped in a cache unless
    /// `cache_capacity` is zero. The remote API key is read from
    /// `EMBEDDER_API_KEY`.
    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbeddingError> {
        let base: Box<dyn Embedder> = match self.provider {
            EmbedderProvider::LocalHash => Box::new(LocalHashEmbedder::new(
                self.dimension.unwrap_or(LocalHashEmbedder::DEFAULT_DIMENSION),
                self.ngram_size,
            )?),
            EmbedderProvider::Remote => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    EmbeddingError::Config("remote embedder requires an endpoint".into())
                })?;
                let model = self.model_name.clone().ok_or_else(|| {
                    EmbeddingError::Config("remote embedder requires a model name".into())
                })?;
                if let Some(d) = self.dimension {
                    if d < 2 {
                        return Err(EmbeddingError::Config(format!(
                            "dimension must be at least 2, got {d}"
                        )));
                    }
                }
                Box::new(RemoteEmbedder::new(
                    endpoint,
                    model,
                    std::env::var(EMBEDDER_API_KEY_ENV).ok(),
                    self.dimension,
                    self.batch_size,
                    Duration::from_secs(self.timeout_secs),
                    self.max_retries,
                )?)
            }
        };
        Ok(match NonZeroUsize::new(self.cache_capacity) {
            Some(cap) => Arc::new(CachedEmbedder::new(base, cap)),
            None => Arc::from(base),
        })
    }
}
