//! Everything that talks to a multimodal model.
//!
//! The model is only ever asked for the logits of two candidate answer
//! tokens at the score-token position. Probabilities are a two-way softmax
//! over those logits.

mod cache;
mod http;
mod mock;
mod prompt;
pub mod stub;
pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::EncodedImage;

pub use cache::{cached_query, CacheError, CacheRecord, CacheStats, ResponseCache};
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{
    laplacian_quality, mock_query, thumbnail, thumbnail_distance, ImageMeta, MockBackend,
    MockBiasConfig, THUMBNAIL_SIDE,
};
pub use prompt::{render_prompt, PromptKind};

/// Logits of the two candidate tokens, in request order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogits {
    pub first: f64,
    pub second: f64,
}

impl TokenLogits {
    pub fn new(first: f64, second: f64) -> Result<Self, BackendError> {
        if !first.is_finite() || !second.is_finite() {
            return Err(BackendError::Protocol(format!(
                "non-finite logits ({first}, {second})"
            )));
        }
        Ok(Self { first, second })
    }

    /// Probability of the first token.
    pub fn probability(&self) -> f64 {
        softmax_pair(*self)
    }
}

/// `e^a / (e^a + e^b)` with max subtraction.
pub fn softmax_pair(l: TokenLogits) -> f64 {
    let m = l.first.max(l.second);
    let ea = (l.first - m).exp();
    let eb = (l.second - m).exp();
    ea / (ea + eb)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error (HTTP {status}): {message}")]
    Remote { status: u16, message: String },
    #[error("no metadata registered for image {0}")]
    MissingMetadata(String),
    #[error("backend `{0}` is offline")]
    Offline(String),
}

/// A deterministic source of candidate-token logits.
///
/// Identical requests to a backend with the same [`id`](OracleBackend::id)
/// must yield identical logits; the id is part of every cache key.
pub trait OracleBackend: Send + Sync {
    fn id(&self) -> &str;
    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError>;
}

impl<B: OracleBackend + ?Sized> OracleBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        (**self).query(req)
    }
}

impl<B: OracleBackend + ?Sized> OracleBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        (**self).query(req)
    }
}

/// A request: one prompt kind, its images in prompt order, and the two
/// candidate tokens implied by the kind.
#[derive(Debug, Clone)]
pub struct OracleRequest<'a> {
    kind: PromptKind,
    images: Vec<&'a EncodedImage>,
}

impl<'a> OracleRequest<'a> {
    pub fn new(kind: PromptKind, images: Vec<&'a EncodedImage>) -> Result<Self, OracleError> {
        if images.len() != kind.image_count() {
            return Err(OracleError::InvalidRequest(format!(
                "{kind:?} takes {} image(s), got {}",
                kind.image_count(),
                images.len()
            )));
        }
        Ok(Self { kind, images })
    }

    pub fn vanilla(x: &'a EncodedImage) -> Self {
        Self {
            kind: PromptKind::VanillaQuality,
            images: vec![x],
        }
    }

    /// Conditional image first, query second.
    pub fn conditional(
        kind: PromptKind,
        x_cond: &'a EncodedImage,
        x: &'a EncodedImage,
    ) -> Result<Self, OracleError> {
        if !kind.is_conditional() {
            return Err(OracleError::InvalidRequest(format!(
                "{kind:?} is not a conditional prompt"
            )));
        }
        Ok(Self {
            kind,
            images: vec![x_cond, x],
        })
    }

    pub fn semantic(x: &'a EncodedImage, x_prime: &'a EncodedImage) -> Self {
        Self {
            kind: PromptKind::SemanticConsistency,
            images: vec![x, x_prime],
        }
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn images(&self) -> &[&'a EncodedImage] {
        &self.images
    }

    pub fn candidate_tokens(&self) -> [&'static str; 2] {
        self.kind.candidate_tokens()
    }

    pub fn prompt(&self) -> &'static str {
        render_prompt(self.kind)
    }

    pub fn image_hashes(&self) -> Vec<String> {
        self.images.iter().map(|i| i.hash().to_owned()).collect()
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{kind} query failed: {source}")]
    Backend {
        kind: PromptKind,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// A backend with an optional response cache in front of it.
#[derive(Clone, Copy)]
pub struct Oracle<'a> {
    backend: &'a dyn OracleBackend,
    cache: Option<&'a ResponseCache>,
}

impl<'a> Oracle<'a> {
    pub fn new(backend: &'a dyn OracleBackend) -> Self {
        Self {
            backend,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend(&self) -> &'a dyn OracleBackend {
        self.backend
    }

    pub fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, OracleError> {
        match self.cache {
            Some(cache) => cached_query(cache, self.backend, req),
            None => self.backend.query(req).map_err(|source| OracleError::Backend {
                kind: req.kind(),
                source,
            }),
        }
    }

    /// Probability of "good" for `x` under the vanilla prompt.
    pub fn quality_prob_single(&self, x: &EncodedImage) -> Result<f64, OracleError> {
        Ok(softmax_pair(self.query(&OracleRequest::vanilla(x))?))
    }

    /// Probability of "good" for `x` given that `x_cond` is declared poor.
    pub fn quality_prob_conditional(
        &self,
        x_cond: &EncodedImage,
        x: &EncodedImage,
        kind: PromptKind,
    ) -> Result<f64, OracleError> {
        let req = OracleRequest::conditional(kind, x_cond, x)?;
        Ok(softmax_pair(self.query(&req)?))
    }

    /// Probability of "yes" to "do these two images describe the same object".
    pub fn semantic_consistency(
        &self,
        x: &EncodedImage,
        x_prime: &EncodedImage,
    ) -> Result<f64, OracleError> {
        Ok(softmax_pair(self.query(&OracleRequest::semantic(x, x_prime))?))
    }
}

/// Counts calls that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: OracleBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: OracleBackend> OracleBackend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.query(req)
    }
}

/// Impersonates a backend id but refuses every query. Replaying from a warm
/// cache through this proves no live call was needed.
pub struct OfflineBackend {
    id: String,
}

impl OfflineBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl OracleBackend for OfflineBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, _req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        Err(BackendError::Offline(self.id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(a: f64, b: f64) -> TokenLogits {
        TokenLogits::new(a, b).unwrap()
    }

    #[test]
    fn softmax_values() {
        assert_eq!(softmax_pair(logits(0.0, 0.0)), 0.5);
        assert!((softmax_pair(logits(3f64.ln(), 0.0)) - 0.75).abs() < 1e-15);
        // 1 - p = e^-1000 / (1 + e^-1000), about 5e-435: exactly 1 in f64.
        let p = softmax_pair(logits(1000.0, 0.0));
        assert!(p.is_finite());
        assert!((p - 1.0).abs() < 1e-12);
        let q = softmax_pair(logits(-1000.0, 1000.0));
        assert!((0.0..1e-12).contains(&q));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(TokenLogits::new(f64::NAN, 0.0).is_err());
        assert!(TokenLogits::new(0.0, f64::INFINITY).is_err());
    }

    proptest! {
        #[test]
        fn softmax_complement(a in -500.0f64..500.0, b in -500.0f64..500.0) {
            let p = softmax_pair(logits(a, b));
            let q = softmax_pair(logits(b, a));
            prop_assert!((p + q - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn softmax_monotone(a in -15.0f64..15.0, b in -15.0f64..15.0, d in 0.01f64..5.0) {
            prop_assert!(softmax_pair(logits(a + d, b)) > softmax_pair(logits(a, b)));
            prop_assert!(softmax_pair(logits(a, b + d)) < softmax_pair(logits(a, b)));
        }
    }
}
