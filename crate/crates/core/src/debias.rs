//! Debiased quality prediction.
//!
//! Each enabled distortion family produces a conditional image `x'` that is
//! declared poor in the prompt. The model's probability of "good" for `x`
//! given `x'` is weighted by how consistent the model finds the semantics of
//! `x` and `x'`:
//!
//! ```text
//! p(y | x)   = sum_i p(y | x, x'_i) p(x'_i | x)
//! p(x'_i | x) = exp(w_i) / sum_j exp(w_j)
//! w_i        = P("yes" | same object? x, x'_i)
//! ```
//!
//! The softmax is applied to the probabilities `w_i` themselves.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distortions::{splitmix64, DistortionError, DistortionKind, DistortionParams};
use crate::image::{EncodedImage, ImageError};
use crate::oracle::{Oracle, OracleBackend, OracleError, PromptKind, ResponseCache};

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("invalid debias config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {probs} probabilities, {weights} weights")]
    LengthMismatch { probs: usize, weights: usize },
    #[error("no conditions to aggregate")]
    Empty,
    #[error("building {kind} condition: {source}")]
    Distortion {
        kind: DistortionKind,
        #[source]
        source: DistortionError,
    },
    #[error("encoding image: {0}")]
    Image(#[from] ImageError),
    #[error("{}: {source}", match .kind { Some(k) => format!("{k} condition"), None => "vanilla score".to_owned() })]
    Oracle {
        kind: Option<DistortionKind>,
        #[source]
        source: OracleError,
    },
    #[error("no conditional images supplied for image {0}")]
    MissingConditions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Softmax over semantic-consistency probabilities.
    #[default]
    SemanticSoftmax,
    /// Equal weights.
    Average,
    /// The single most semantically consistent condition.
    WinnerTakesAll,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::SemanticSoftmax => "semantic",
            Aggregation::Average => "average",
            Aggregation::WinnerTakesAll => "wta",
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "semantic" | "semantic_softmax" => Ok(Aggregation::SemanticSoftmax),
            "average" | "avg" => Ok(Aggregation::Average),
            "wta" | "winner_takes_all" => Ok(Aggregation::WinnerTakesAll),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub distortions: DistortionParams,
    /// One of the conditional prompt kinds.
    pub prompt_kind: PromptKind,
    pub aggregation: Aggregation,
    /// Non-empty, no duplicates. Evaluated in [`DistortionKind::ALL`] order.
    pub enabled_kinds: Vec<DistortionKind>,
    /// When false no consistency queries are made and weights are uniform.
    pub semantic_consistency: bool,
    /// Conditional images drawn per kind; probabilities and consistency
    /// scores are averaged over the draws.
    pub samples_per_kind: usize,
    pub compute_vanilla: bool,
    /// Mixed with each image's content hash to seed its distortions.
    pub seed: u64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            distortions: DistortionParams::default(),
            prompt_kind: PromptKind::ConditionalQuality,
            aggregation: Aggregation::SemanticSoftmax,
            enabled_kinds: DistortionKind::ALL.to_vec(),
            semantic_consistency: true,
            samples_per_kind: 1,
            compute_vanilla: true,
            seed: 0,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<(), DebiasError> {
        if self.enabled_kinds.is_empty() {
            return Err(DebiasError::InvalidConfig("enabled_kinds is empty".into()));
        }
        for (i, k) in self.enabled_kinds.iter().enumerate() {
            if self.enabled_kinds[..i].contains(k) {
                return Err(DebiasError::InvalidConfig(format!("{k} listed twice")));
            }
        }
        if !self.prompt_kind.is_conditional() {
            return Err(DebiasError::InvalidConfig(format!(
                "{} is not a conditional prompt",
                self.prompt_kind
            )));
        }
        if self.samples_per_kind == 0 {
            return Err(DebiasError::InvalidConfig("samples_per_kind must be >= 1".into()));
        }
        if !self.semantic_consistency && self.aggregation == Aggregation::WinnerTakesAll {
            return Err(DebiasError::InvalidConfig(
                "winner-takes-all needs semantic consistency scores".into(),
            ));
        }
        self.distortions.validate().map_err(|e| DebiasError::InvalidConfig(e.to_string()))
    }

    /// Enabled kinds in canonical order.
    pub fn kinds(&self) -> Vec<DistortionKind> {
        DistortionKind::ALL
            .into_iter()
            .filter(|k| self.enabled_kinds.contains(k))
            .collect()
    }

    /// 16 hex characters identifying this configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_owned()
    }

    /// Distortion parameters for draw `sample` of the image with `image_hash`.
    pub fn params_for(&self, image_hash: u64, sample: usize) -> DistortionParams {
        let seed = splitmix64(splitmix64(self.seed ^ image_hash).wrapping_add(sample as u64));
        self.distortions.with_seed(seed)
    }
}

/// Normalized condition weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionWeights {
    weights: Vec<f64>,
}

impl ConditionWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Softmax over `w`.
pub fn condition_weights(w: &[f64]) -> ConditionWeights {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    ConditionWeights {
        weights: e.into_iter().map(|v| v / z).collect(),
    }
}

/// Weighted sum of `probs`.
pub fn aggregate(probs: &[f64], weights: &ConditionWeights) -> Result<f64, DebiasError> {
    if probs.len() != weights.len() {
        return Err(DebiasError::LengthMismatch {
            probs: probs.len(),
            weights: weights.len(),
        });
    }
    if probs.is_empty() {
        return Err(DebiasError::Empty);
    }
    let s: f64 = probs.iter().zip(weights.as_slice()).map(|(p, w)| p * w).sum();
    // Rounding can push a convex combination a hair outside its hull.
    let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(s.clamp(lo, hi))
}

pub fn aggregate_average(probs: &[f64]) -> Result<f64, DebiasError> {
    if probs.is_empty() {
        return Err(DebiasError::Empty);
    }
    aggregate(probs, &ConditionWeights::uniform(probs.len()))
}

/// `probs[argmax w]`, ties to the lowest index.
pub fn aggregate_winner_takes_all(probs: &[f64], w: &[f64]) -> Result<f64, DebiasError> {
    if probs.len() != w.len() {
        return Err(DebiasError::LengthMismatch {
            probs: probs.len(),
            weights: w.len(),
        });
    }
    Ok(probs[argmax(w).ok_or(DebiasError::Empty)?])
}

fn argmax(w: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in w.iter().enumerate() {
        if best.is_none_or(|b| v > w[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub kind: DistortionKind,
    /// Probability of "good" given this condition.
    pub prob: f64,
    /// Weight used in the aggregate.
    pub weight: f64,
    /// Semantic-consistency probability, absent when not queried.
    pub w_raw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedPrediction {
    pub score: f64,
    pub per_condition: Vec<ConditionRecord>,
    pub vanilla_score: Option<f64>,
}

/// Source of conditional images for a query image.
pub trait ConditionProvider: Send + Sync {
    /// For each kind of `cfg.kinds()`, in order, `cfg.samples_per_kind`
    /// conditional images.
    fn conditions(
        &self,
        x: &EncodedImage,
        cfg: &DebiasConfig,
    ) -> Result<Vec<(DistortionKind, Vec<EncodedImage>)>, DebiasError>;
}

/// Distorts the query image itself, seeded from its content hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratedConditions;

impl ConditionProvider for GeneratedConditions {
    fn conditions(
        &self,
        x: &EncodedImage,
        cfg: &DebiasConfig,
    ) -> Result<Vec<(DistortionKind, Vec<EncodedImage>)>, DebiasError> {
        cfg.kinds()
            .into_iter()
            .map(|kind| {
                let draws = (0..cfg.samples_per_kind)
                    .map(|s| {
                        let img = cfg
                            .params_for(x.hash_u64(), s)
                            .apply(kind, x.image())
                            .map_err(|source| DebiasError::Distortion { kind, source })?;
                        Ok(EncodedImage::new(img)?)
                    })
                    .collect::<Result<Vec<_>, DebiasError>>()?;
                Ok((kind, draws))
            })
            .collect()
    }
}

/// Externally supplied conditional images, keyed by query image hash.
#[derive(Debug, Clone, Default)]
pub struct SuppliedConditions {
    by_hash: HashMap<String, Vec<(DistortionKind, EncodedImage)>>,
}

impl SuppliedConditions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_hash: &str, images: Vec<(DistortionKind, EncodedImage)>) {
        self.by_hash.insert(query_hash.to_owned(), images);
    }
}

impl ConditionProvider for SuppliedConditions {
    fn conditions(
        &self,
        x: &EncodedImage,
        cfg: &DebiasConfig,
    ) -> Result<Vec<(DistortionKind, Vec<EncodedImage>)>, DebiasError> {
        let supplied = self
            .by_hash
            .get(x.hash())
            .ok_or_else(|| DebiasError::MissingConditions(x.hash().to_owned()))?;
        cfg.kinds()
            .into_iter()
            .map(|kind| {
                let draws: Vec<EncodedImage> = supplied
                    .iter()
                    .filter(|(k, _)| *k == kind)
                    .map(|(_, img)| img.clone())
                    .collect();
                if draws.is_empty() {
                    Err(DebiasError::MissingConditions(format!("{} ({kind})", x.hash())))
                } else {
                    Ok((kind, draws))
                }
            })
            .collect()
    }
}

/// Debiased prediction with conditions generated from `x`.
pub fn predict_debiased(
    backend: &dyn OracleBackend,
    cache: Option<&ResponseCache>,
    x: &EncodedImage,
    cfg: &DebiasConfig,
) -> Result<DebiasedPrediction, DebiasError> {
    predict_with_provider(backend, cache, x, cfg, &GeneratedConditions)
}

pub fn predict_with_provider(
    backend: &dyn OracleBackend,
    cache: Option<&ResponseCache>,
    x: &EncodedImage,
    cfg: &DebiasConfig,
    provider: &dyn ConditionProvider,
) -> Result<DebiasedPrediction, DebiasError> {
    cfg.validate()?;
    let mut oracle = Oracle::new(backend);
    if let Some(c) = cache {
        oracle = oracle.with_cache(c);
    }
    let conditions = provider.conditions(x, cfg)?;

    let mut probs = Vec::with_capacity(conditions.len());
    let mut raw = Vec::with_capacity(conditions.len());
    for (kind, draws) in &conditions {
        let annotate = |source| DebiasError::Oracle {
            kind: Some(*kind),
            source,
        };
        let n = draws.len() as f64;
        let mut p = 0.0;
        let mut w = 0.0;
        for cond in draws {
            p += oracle
                .quality_prob_conditional(cond, x, cfg.prompt_kind)
                .map_err(annotate)?;
            if cfg.semantic_consistency {
                w += oracle.semantic_consistency(x, cond).map_err(annotate)?;
            }
        }
        probs.push(p / n);
        raw.push(cfg.semantic_consistency.then_some(w / n));
    }

    let w: Vec<f64> = raw.iter().map(|v| v.unwrap_or(0.0)).collect();
    let (score, weights) = match (cfg.aggregation, cfg.semantic_consistency) {
        (Aggregation::SemanticSoftmax, true) => {
            let cw = condition_weights(&w);
            (aggregate(&probs, &cw)?, cw.as_slice().to_vec())
        }
        (Aggregation::WinnerTakesAll, _) => {
            let win = argmax(&w).ok_or(DebiasError::Empty)?;
            let one_hot = (0..probs.len()).map(|i| f64::from(u8::from(i == win))).collect();
            (aggregate_winner_takes_all(&probs, &w)?, one_hot)
        }
        _ => (
            aggregate_average(&probs)?,
            ConditionWeights::uniform(probs.len()).as_slice().to_vec(),
        ),
    };

    let vanilla_score = if cfg.compute_vanilla {
        Some(
            oracle
                .quality_prob_single(x)
                .map_err(|source| DebiasError::Oracle { kind: None, source })?,
        )
    } else {
        None
    };

    let per_condition = conditions
        .iter()
        .zip(probs.iter().zip(weights.iter().zip(&raw)))
        .map(|((kind, _), (&prob, (&weight, &w_raw)))| ConditionRecord {
            kind: *kind,
            prob,
            weight,
            w_raw,
        })
        .collect();

    Ok(DebiasedPrediction {
        score,
        per_condition,
        vanilla_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::test_util::natural_image;
    use crate::oracle::{CountingBackend, ImageMeta, MockBackend, MockBiasConfig};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn weights_examples() {
        let w = condition_weights(&[0.5; 4]);
        assert!(w.as_slice().iter().all(|&v| close(v, 0.25, 1e-15)));
        let w = condition_weights(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!(close(w.as_slice()[0], e / (e + 1.0), 1e-15));
        assert!(close(w.as_slice()[1], 1.0 / (e + 1.0), 1e-15));
    }

    #[test]
    fn aggregate_examples() {
        let w = condition_weights(&[1.0, 0.0]);
        assert!(close(aggregate(&[1.0, 0.0], &w).unwrap(), 0.7310585786, 1e-9));
        assert_eq!(aggregate(&[0.7; 3], &condition_weights(&[0.1, 0.5, 0.9])).unwrap(), 0.7);
        assert!(matches!(
            aggregate(&[0.1, 0.2], &ConditionWeights::uniform(3)),
            Err(DebiasError::LengthMismatch { .. })
        ));
        assert_eq!(aggregate_average(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(aggregate_average(&[]).is_err());
    }

    #[test]
    fn winner_takes_all_examples() {
        let probs = [0.11, 0.22, 0.33, 0.44];
        assert_eq!(aggregate_winner_takes_all(&probs, &[0.1, 0.9, 0.2, 0.3]).unwrap(), 0.22);
        assert_eq!(aggregate_winner_takes_all(&probs, &[0.5; 4]).unwrap(), 0.11);
        assert!(aggregate_winner_takes_all(&probs, &[0.5; 3]).is_err());
    }

    proptest! {
        #[test]
        fn average_matches_uniform_weights(p in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
            let n = p.len();
            let a = aggregate_average(&p).unwrap();
            let mean = p.iter().sum::<f64>() / n as f64;
            prop_assert!((a - mean).abs() <= 1e-12);
        }

        #[test]
        fn weight_order_follows_input(w in proptest::collection::vec(0.0f64..=1.0, 2..6)) {
            let cw = condition_weights(&w);
            prop_assert!((cw.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] < w[j] {
                        prop_assert!(cw.as_slice()[i] < cw.as_slice()[j]);
                    }
                }
            }
        }

        #[test]
        fn wta_ignores_losers(w in proptest::collection::vec(0.0f64..0.5, 4), bump in 0.0f64..0.49) {
            let probs = [0.1, 0.2, 0.3, 0.4];
            let mut w = w;
            w[2] = 0.99;
            let before = aggregate_winner_takes_all(&probs, &w).unwrap();
            w[0] = (w[0] + bump).min(0.98);
            prop_assert_eq!(before, aggregate_winner_takes_all(&probs, &w).unwrap());
        }

        #[test]
        fn aggregate_is_monotone(p in proptest::collection::vec(0.0f64..0.9, 4), d in 0.0f64..0.1, i in 0usize..4) {
            let cw = condition_weights(&[0.3, 0.6, 0.1, 0.9]);
            let base = aggregate(&p, &cw).unwrap();
            let mut q = p.clone();
            q[i] += d;
            prop_assert!(aggregate(&q, &cw).unwrap() >= base);
        }
    }

    fn world() -> (MockBackend, EncodedImage) {
        let backend = MockBackend::new(MockBiasConfig {
            alpha: 6.0,
            class_bias: BTreeMap::from([("a".into(), 2.0)]),
            ..MockBiasConfig::default()
        })
        .unwrap();
        let x = EncodedImage::new(natural_image(32, 32)).unwrap();
        backend.register(&x, ImageMeta::new(0.7, "a"));
        let cfg = DebiasConfig::default();
        for (_, draws) in GeneratedConditions.conditions(&x, &cfg).unwrap() {
            for c in draws {
                backend.register(&c, ImageMeta::new(0.1, "a"));
            }
        }
        (backend, x)
    }

    #[test]
    fn debiased_ignores_shared_bias() {
        let (backend, x) = world();
        let pred = predict_debiased(&backend, None, &x, &DebiasConfig::default()).unwrap();
        let expected = 1.0 / (1.0 + (-6.0f64 * 0.6).exp());
        assert!(close(pred.score, expected, 1e-12), "{}", pred.score);
        let vanilla = 1.0 / (1.0 + (-(6.0f64 * 0.7 + 2.0)).exp());
        assert!(close(pred.vanilla_score.unwrap(), vanilla, 1e-12));
        assert_eq!(pred.per_condition.len(), 4);
        let wsum: f64 = pred.per_condition.iter().map(|c| c.weight).sum();
        assert!(close(wsum, 1.0, 1e-12));
        assert!(pred.per_condition.iter().all(|c| c.w_raw.is_some()));
    }

    #[test]
    fn single_condition_is_its_probability() {
        let (backend, x) = world();
        for aggregation in [Aggregation::SemanticSoftmax, Aggregation::Average, Aggregation::WinnerTakesAll] {
            let cfg = DebiasConfig {
                enabled_kinds: vec![DistortionKind::Fog],
                aggregation,
                ..DebiasConfig::default()
            };
            let pred = predict_debiased(&backend, None, &x, &cfg).unwrap();
            assert_eq!(pred.per_condition.len(), 1);
            assert_eq!(pred.score, pred.per_condition[0].prob);
            assert_eq!(pred.per_condition[0].weight, 1.0);
        }
    }

    #[test]
    fn warm_cache_needs_no_backend_calls() {
        let (backend, x) = world();
        let counting = CountingBackend::new(backend);
        let cache = ResponseCache::in_memory();
        let cfg = DebiasConfig::default();
        let a = predict_debiased(&counting, Some(&cache), &x, &cfg).unwrap();
        assert_eq!(counting.calls(), 9);
        counting.reset();
        let b = predict_debiased(&counting, Some(&cache), &x, &cfg).unwrap();
        assert_eq!(counting.calls(), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn semantic_off_uses_uniform_weights_and_skips_queries() {
        let (backend, x) = world();
        let counting = CountingBackend::new(backend);
        let cfg = DebiasConfig {
            semantic_consistency: false,
            compute_vanilla: false,
            ..DebiasConfig::default()
        };
        let pred = predict_debiased(&counting, None, &x, &cfg).unwrap();
        assert_eq!(counting.calls(), 4);
        assert!(pred.per_condition.iter().all(|c| c.weight == 0.25 && c.w_raw.is_none()));
        assert!(pred.vanilla_score.is_none());
    }

    #[test]
    fn errors_name_the_condition() {
        let backend = MockBackend::new(MockBiasConfig {
            pixel_estimation: false,
            ..MockBiasConfig::default()
        })
        .unwrap();
        let x = EncodedImage::new(natural_image(32, 32)).unwrap();
        backend.register(&x, ImageMeta::new(0.5, "default"));
        let err = predict_debiased(&backend, None, &x, &DebiasConfig::default()).unwrap_err();
        assert!(matches!(err, DebiasError::Oracle { kind: Some(DistortionKind::ZoomBlur), .. }));
        assert!(err.to_string().starts_with("zoom condition"), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = [
            DebiasConfig {
                enabled_kinds: vec![],
                ..DebiasConfig::default()
            },
            DebiasConfig {
                enabled_kinds: vec![DistortionKind::Fog, DistortionKind::Fog],
                ..DebiasConfig::default()
            },
            DebiasConfig {
                prompt_kind: PromptKind::VanillaQuality,
                ..DebiasConfig::default()
            },
            DebiasConfig {
                samples_per_kind: 0,
                ..DebiasConfig::default()
            },
            DebiasConfig {
                semantic_consistency: false,
                aggregation: Aggregation::WinnerTakesAll,
                ..DebiasConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let cfg = DebiasConfig {
            enabled_kinds: vec![DistortionKind::Fog, DistortionKind::ZoomBlur],
            ..DebiasConfig::default()
        };
        assert_eq!(cfg.kinds(), vec![DistortionKind::ZoomBlur, DistortionKind::Fog]);
        assert_eq!(cfg.digest().len(), 16);
        assert_ne!(cfg.digest(), DebiasConfig::default().digest());
    }

    #[test]
    fn supplied_conditions_are_used() {
        let (backend, x) = world();
        let donor = EncodedImage::new(crate::distortions::test_util::random_image(32, 32, 4)).unwrap();
        backend.register(&donor, ImageMeta::new(0.1, "a"));
        let mut supplied = SuppliedConditions::new();
        supplied.insert(
            x.hash(),
            DistortionKind::ALL.iter().map(|&k| (k, donor.clone())).collect(),
        );
        let cfg = DebiasConfig::default();
        let pred = predict_with_provider(&backend, None, &x, &cfg, &supplied).unwrap();
        let w = pred.per_condition[0].w_raw.unwrap();
        assert!(pred.per_condition.iter().all(|c| c.w_raw == Some(w)));
        let other = EncodedImage::new(natural_image(16, 16)).unwrap();
        assert!(matches!(
            predict_with_provider(&backend, None, &other, &cfg, &supplied),
            Err(DebiasError::MissingConditions(_))
        ));
    }
}
