//! A deterministic stand-in for a multimodal model with a semantic bias.
//!
//! Every image has a latent quality `q` in [0, 1] and a class tag carrying a
//! logit offset. Vanilla prompting mixes the offset into the score;
//! conditional prompting compares two images and only sees the difference of
//! their offsets, which is zero when both share a class.
//!
//! | prompt | logits |
//! |---|---|
//! | vanilla | `(alpha (q - center) + beta_class, 0)` |
//! | conditional | `(alpha (q_query - q_cond) + beta_query - beta_cond - margin + noise, 0)` |
//! | semantic | `(gamma (1 - d), gamma d)` with `d` the mean absolute thumbnail difference |

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, OracleBackend, OracleRequest, PromptKind, TokenLogits};
use crate::distortions::splitmix64;
use crate::image::{EncodedImage, ImageRgb};

pub const THUMBNAIL_SIDE: usize = 16;

/// Laplacian energy at which the pixel-based quality estimate reaches 0.5.
const LAPLACIAN_HALF_ENERGY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBiasConfig {
    /// Quality gain, > 0.
    pub alpha: f64,
    /// Logit offset per class tag.
    pub class_bias: BTreeMap<String, f64>,
    /// Semantic-consistency gain, > 0.
    pub gamma: f64,
    pub seed: u64,
    /// Vanilla logits are centered on this quality.
    #[serde(default)]
    pub quality_center: f64,
    /// Subtracted from every conditional logit.
    #[serde(default)]
    pub margin: f64,
    /// Standard deviation of per-request Gaussian noise on conditional logits.
    #[serde(default)]
    pub condition_noise: f64,
    /// Estimate metadata from pixels for unregistered images instead of failing.
    #[serde(default = "default_true")]
    pub pixel_estimation: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MockBiasConfig {
    fn default() -> Self {
        Self {
            alpha: 6.0,
            class_bias: BTreeMap::from([("default".to_owned(), 0.0)]),
            gamma: 4.0,
            seed: 0,
            quality_center: 0.0,
            margin: 0.0,
            condition_noise: 0.0,
            pixel_estimation: true,
        }
    }
}

impl MockBiasConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be finite and > 0, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be finite and > 0, got {}", self.gamma));
        }
        if self.class_bias.is_empty() {
            return Err("at least one class is required".into());
        }
        if self.class_bias.values().any(|b| !b.is_finite()) {
            return Err("class biases must be finite".into());
        }
        if !(self.condition_noise >= 0.0 && self.condition_noise.is_finite()) {
            return Err(format!(
                "condition_noise must be >= 0, got {}",
                self.condition_noise
            ));
        }
        Ok(())
    }

    pub fn bias_of(&self, class_tag: &str) -> f64 {
        self.class_bias.get(class_tag).copied().unwrap_or(0.0)
    }
}

/// Latent ground truth the mock perceives for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub q: f64,
    pub class_tag: String,
    /// Multiplies `condition_noise` when this image is the condition.
    #[serde(default = "unit")]
    pub noise_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl ImageMeta {
    pub fn new(q: f64, class_tag: impl Into<String>) -> Self {
        Self {
            q,
            class_tag: class_tag.into(),
            noise_scale: 1.0,
        }
    }

    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_scale = scale;
        self
    }
}

/// Grayscale box-averaged thumbnail, `THUMBNAIL_SIDE` on each side.
pub fn thumbnail(image: &ImageRgb) -> Vec<f64> {
    let (h, w) = image.dims();
    let luma = image.luma();
    let n = THUMBNAIL_SIDE;
    let mut sums = vec![0.0; n * n];
    let mut counts = vec![0usize; n * n];
    for r in 0..h {
        let tr = r * n / h;
        for c in 0..w {
            let tc = c * n / w;
            sums[tr * n + tc] += luma[r * w + c];
            counts[tr * n + tc] += 1;
        }
    }
    // Images narrower than the thumbnail leave cells empty; fill them from
    // the nearest source pixel instead.
    for tr in 0..n {
        for tc in 0..n {
            let i = tr * n + tc;
            if counts[i] == 0 {
                let r = (tr * h / n).min(h - 1);
                let c = (tc * w / n).min(w - 1);
                sums[i] = luma[r * w + c];
                counts[i] = 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

/// Mean absolute difference of the two thumbnails, in [0, 1].
pub fn thumbnail_distance(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let ta = thumbnail(a);
    let tb = thumbnail(b);
    ta.iter().zip(&tb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ta.len() as f64
}

/// Pixel-based quality: Laplacian energy `E` of the luma plane mapped to
/// `E / (E + 0.01)`.
pub fn laplacian_quality(image: &ImageRgb) -> f64 {
    let (h, w) = image.dims();
    let luma = image.luma();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        luma[r * w + c]
    };
    let mut energy = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let lap = 4.0 * at(r, c) - at(r - 1, c) - at(r + 1, c) - at(r, c - 1) - at(r, c + 1);
            energy += lap * lap;
        }
    }
    energy /= (h * w) as f64;
    energy / (energy + LAPLACIAN_HALF_ENERGY)
}

/// Pure logit rule given per-image metadata in request order.
pub fn mock_query(
    cfg: &MockBiasConfig,
    req: &OracleRequest<'_>,
    meta: &[ImageMeta],
) -> TokenLogits {
    match req.kind() {
        PromptKind::VanillaQuality => {
            let m = &meta[0];
            TokenLogits {
                first: cfg.alpha * (m.q - cfg.quality_center) + cfg.bias_of(&m.class_tag),
                second: 0.0,
            }
        }
        PromptKind::SemanticConsistency => {
            let imgs = req.images();
            let d = thumbnail_distance(imgs[0].image(), imgs[1].image());
            TokenLogits {
                first: cfg.gamma * (1.0 - d),
                second: cfg.gamma * d,
            }
        }
        _ => {
            let (cond, query) = (&meta[0], &meta[1]);
            let bias = cfg.bias_of(&query.class_tag) - cfg.bias_of(&cond.class_tag);
            let sigma = cfg.condition_noise * cond.noise_scale;
            let noise = if sigma > 0.0 {
                request_noise(cfg.seed, sigma, req)
            } else {
                0.0
            };
            TokenLogits {
                first: cfg.alpha * (query.q - cond.q) + bias - cfg.margin + noise,
                second: 0.0,
            }
        }
    }
}

fn request_noise(seed: u64, sigma: f64, req: &OracleRequest<'_>) -> f64 {
    let mut seed = splitmix64(seed);
    for img in req.images() {
        seed = splitmix64(seed ^ img.hash_u64());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Normal::new(0.0, sigma)
        .expect("finite sigma")
        .sample(&mut rng)
}

/// The mock model: a [`MockBiasConfig`] plus a registry of image metadata
/// keyed by content hash.
pub struct MockBackend {
    cfg: MockBiasConfig,
    id: String,
    classes: Vec<String>,
    registry: RwLock<HashMap<String, ImageMeta>>,
}

impl MockBackend {
    pub fn new(cfg: MockBiasConfig) -> Result<Self, String> {
        cfg.validate()?;
        let digest = Sha256::digest(serde_json::to_vec(&cfg).expect("config serializes"));
        let id = format!("mock-{}", &hex::encode(digest)[..12]);
        let classes = cfg.class_bias.keys().cloned().collect();
        Ok(Self {
            cfg,
            id,
            classes,
            registry: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &MockBiasConfig {
        &self.cfg
    }

    pub fn register(&self, image: &EncodedImage, meta: ImageMeta) {
        self.register_hash(image.hash(), meta);
    }

    pub fn register_hash(&self, hash: &str, meta: ImageMeta) {
        self.registry
            .write()
            .expect("registry lock")
            .insert(hash.to_owned(), meta);
    }

    pub fn registered(&self) -> usize {
        self.registry.read().expect("registry lock").len()
    }

    /// Registered metadata, or a pixel estimate when allowed.
    pub fn meta_for(&self, image: &EncodedImage) -> Result<ImageMeta, BackendError> {
        if let Some(meta) = self.registry.read().expect("registry lock").get(image.hash()) {
            return Ok(meta.clone());
        }
        if !self.cfg.pixel_estimation {
            return Err(BackendError::MissingMetadata(image.hash().to_owned()));
        }
        Ok(ImageMeta::new(
            laplacian_quality(image.image()),
            self.class_from_thumbnail(image.image()),
        ))
    }

    fn class_from_thumbnail(&self, image: &ImageRgb) -> String {
        let coarse: Vec<u8> = thumbnail(image)
            .iter()
            .map(|v| (v * 3.999).floor() as u8)
            .collect();
        let digest = Sha256::digest(&coarse);
        let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        self.classes[(idx % self.classes.len() as u64) as usize].clone()
    }
}

impl OracleBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, req: &OracleRequest<'_>) -> Result<TokenLogits, BackendError> {
        let meta = match req.kind() {
            PromptKind::SemanticConsistency => Vec::new(),
            _ => req
                .images()
                .iter()
                .map(|img| self.meta_for(img))
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(mock_query(&self.cfg, req, &meta))
    }
}
