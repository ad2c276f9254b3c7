//! A synthetic world with a known semantic bias.
//!
//! Each image belongs to a class with a distinct procedural texture and has
//! a latent quality `q`, rendered as sharpness: the texture is blurred with
//! `sigma = (1 - q) * sigma_max`. The mock backend adds a per-class offset
//! to vanilla logits, so vanilla scores mix quality with class; conditional
//! logits compare an image with its own distortions, which share the class.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debias::{
    ConditionProvider, DebiasConfig, DebiasError, GeneratedConditions, SuppliedConditions,
};
use crate::distortions::{splitmix64, DistortionKind};
use crate::eval::{
    report, run_batch_with_provider, vanilla_report, write_manifest, write_predictions,
    write_report_json, write_summary_csv, CorrelationReport, EvalError, ManifestEntry, PlccMode,
    PredictionRecord,
};
use crate::image::{gaussian_blur, hsv_to_rgb_pixel, load_png, save_png, EncodedImage, ImageError, ImageRgb};
use crate::oracle::{ImageMeta, MockBackend, MockBiasConfig, OracleBackend, ResponseCache};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Debias(#[from] DebiasError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_images: usize,
    pub n_classes: usize,
    /// Class offsets are spread evenly over `[-m, m]`.
    pub class_bias_magnitude: f64,
    /// Latent qualities lie in this open interval.
    pub quality_range: (f64, f64),
    pub image_size: usize,
    pub seed: u64,
    /// Blur at `q = 0`.
    pub sigma_max: f64,
    /// Latent quality registered for every conditional image.
    pub condition_quality: f64,
    /// Per-kind multiplier of the mock's conditional noise, in
    /// [`DistortionKind::ALL`] order.
    pub condition_noise_scales: [f64; 4],
    /// Each conditional image's noise scale is further multiplied by
    /// `exp(spread * z)`, `z` standard normal, seeded per image.
    pub condition_noise_spread: f64,
    /// Standard deviation of Gaussian noise added to MOS.
    pub mos_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            n_classes: 4,
            class_bias_magnitude: 3.0,
            quality_range: (0.05, 0.95),
            image_size: 64,
            seed: 0,
            sigma_max: 3.0,
            condition_quality: 0.0,
            condition_noise_scales: [1.0; 4],
            condition_noise_spread: 0.0,
            mos_noise: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_images < 3 * self.n_classes {
            return bad(format!(
                "need at least {} images for {} classes, got {}",
                3 * self.n_classes,
                self.n_classes,
                self.n_images
            ));
        }
        if self.image_size < 32 {
            return bad(format!("image_size must be >= 32, got {}", self.image_size));
        }
        let (lo, hi) = self.quality_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("quality_range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"));
        }
        if !(self.class_bias_magnitude >= 0.0 && self.class_bias_magnitude.is_finite()) {
            return bad("class_bias_magnitude must be finite and >= 0".into());
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return bad("sigma_max must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.condition_quality) {
            return bad("condition_quality must lie in [0, 1]".into());
        }
        if self.condition_noise_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("condition_noise_scales must be finite and >= 0".into());
        }
        if !(self.condition_noise_spread >= 0.0 && self.condition_noise_spread.is_finite()) {
            return bad("condition_noise_spread must be finite and >= 0".into());
        }
        if !(self.mos_noise >= 0.0 && self.mos_noise.is_finite()) {
            return bad("mos_noise must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Noise multiplier registered for conditional image `c` of `kind`.
    pub fn noise_scale_for(&self, kind: DistortionKind, c: &EncodedImage) -> f64 {
        let base = self.condition_noise_scales[kind.index()];
        if self.condition_noise_spread == 0.0 {
            return base;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ c.hash_u64()));
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        base * (self.condition_noise_spread * z).exp()
    }

    pub fn class_tag(i: usize) -> String {
        format!("class_{i}")
    }

    /// `linspace(-m, m, n_classes)` keyed by class tag.
    pub fn class_biases(&self) -> BTreeMap<String, f64> {
        let k = self.n_classes;
        let m = self.class_bias_magnitude;
        (0..k)
            .map(|i| {
                let t = i as f64 / (k - 1) as f64;
                (Self::class_tag(i), -m + 2.0 * m * t)
            })
            .collect()
    }
}

/// Unblurred texture of class `class` out of `n_classes`, with a per-image
/// phase offset.
pub fn class_texture(class: usize, n_classes: usize, size: usize, phase: f64) -> ImageRgb {
    let k = class as f64;
    let theta = PI * k / n_classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    // Periods between 5 and 9 pixels: well inside the band the blur removes.
    let period = 5.0 + 4.0 * k / (n_classes - 1).max(1) as f64;
    let hue = k / n_classes as f64;
    let (cy, cx) = (
        0.3 + 0.4 * ((k * 0.618).fract()),
        0.3 + 0.4 * ((k * 0.382 + 0.5).fract()),
    );
    let n = size as f64;
    ImageRgb::from_fn(size, size, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let grating = 0.5 + 0.5 * (2.0 * PI * (x * ct + y * st) / period + phase).sin();
        let (dy, dx) = (y / n - cy, x / n - cx);
        let blob = (-(dy * dy + dx * dx) / 0.02).exp();
        let value = 0.2 + 0.5 * grating + 0.3 * blob;
        hsv_to_rgb_pixel([hue, 0.55 + 0.3 * blob, value.min(1.0)])
    })
    .expect("size is nonzero")
}

/// Texture blurred according to `q`.
pub fn render_image(class: usize, n_classes: usize, size: usize, phase: f64, q: f64, sigma_max: f64) -> ImageRgb {
    gaussian_blur(&class_texture(class, n_classes, size, phase), (1.0 - q) * sigma_max)
}

/// Writes `images/img_NNNN.png` and `manifest.csv` under `out_dir`.
///
/// Classes are assigned round-robin and shuffled, so each appears
/// `n_images / n_classes` times (plus one for the first remainder classes).
/// Within a class, latent qualities are stratified: slot `j` of `m` gets
/// `lo + (hi - lo) (j + u) / m` with `u` uniform in (0, 1).
pub fn generate_synthetic_dataset(cfg: &SimConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>, SimError> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| SimError::Io {
        path: images_dir.clone(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));

    let mut classes: Vec<usize> = (0..cfg.n_images).map(|i| i % cfg.n_classes).collect();
    classes.shuffle(&mut rng);

    let (lo, hi) = cfg.quality_range;
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_classes];
    for (i, &c) in classes.iter().enumerate() {
        slots[c].push(i);
    }
    let mut q = vec![0.0; cfg.n_images];
    for members in &slots {
        let m = members.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for (&idx, &j) in members.iter().zip(&order) {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            q[idx] = lo + (hi - lo) * (j as f64 + u) / m as f64;
        }
    }

    let mos_noise = (cfg.mos_noise > 0.0).then(|| Normal::new(0.0, cfg.mos_noise).expect("validated"));
    let mut entries = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let phase = rng.random_range(0.0..2.0 * PI);
        let img = render_image(classes[i], cfg.n_classes, cfg.image_size, phase, q[i], cfg.sigma_max);
        let path = images_dir.join(format!("img_{i:04}.png"));
        save_png(&img, &path)?;
        let mos = match &mos_noise {
            Some(d) => q[i] + d.sample(&mut rng),
            None => q[i],
        };
        entries.push(ManifestEntry {
            image_id: format!("img_{i:04}"),
            path,
            mos,
            class_tag: Some(SimConfig::class_tag(classes[i])),
            latent_q: Some(q[i]),
        });
    }
    write_manifest(out_dir.join("manifest.csv"), &entries).map_err(EvalError::from)?;
    Ok(entries)
}

/// A generated dataset and a mock backend that knows every image in it.
pub struct SimWorld {
    pub cfg: SimConfig,
    pub entries: Vec<ManifestEntry>,
    /// Query images as decoded from disk, in manifest order.
    pub images: Vec<EncodedImage>,
    pub backend: MockBackend,
}

impl SimWorld {
    /// Generates the dataset under `out_dir` and registers query images and
    /// their generated conditional images with the mock. `mock_cfg.class_bias`
    /// is replaced by [`SimConfig::class_biases`].
    pub fn build(
        cfg: &SimConfig,
        mock_cfg: &MockBiasConfig,
        debias_cfg: &DebiasConfig,
        out_dir: &Path,
    ) -> Result<Self, SimError> {
        let entries = generate_synthetic_dataset(cfg, out_dir)?;
        let mock_cfg = MockBiasConfig {
            class_bias: cfg.class_biases(),
            ..mock_cfg.clone()
        };
        let backend = MockBackend::new(mock_cfg).map_err(SimError::Config)?;
        let mut images = Vec::with_capacity(entries.len());
        for e in &entries {
            let x = EncodedImage::new(load_png(&e.path)?)?;
            let class = e.class_tag.clone().expect("simulation entries are tagged");
            backend.register(&x, ImageMeta::new(e.latent_q.expect("simulation entries have q"), &class));
            for (kind, draws) in GeneratedConditions.conditions(&x, debias_cfg)? {
                for c in draws {
                    let meta = ImageMeta::new(cfg.condition_quality, &class)
                        .with_noise_scale(cfg.noise_scale_for(kind, &c));
                    backend.register(&c, meta);
                }
            }
            images.push(x);
        }
        Ok(Self {
            cfg: cfg.clone(),
            entries,
            images,
            backend,
        })
    }

    /// Conditions taken from a different-class image instead of the query
    /// itself: image `i` borrows the generated conditions of the next image
    /// (cyclically) whose class differs.
    pub fn mismatched_conditions(&self, debias_cfg: &DebiasConfig) -> Result<SuppliedConditions, SimError> {
        let n = self.entries.len();
        let mut supplied = SuppliedConditions::new();
        for i in 0..n {
            let donor = (1..n)
                .map(|d| (i + d) % n)
                .find(|&j| self.entries[j].class_tag != self.entries[i].class_tag)
                .expect("at least two classes");
            let conds: Vec<(DistortionKind, EncodedImage)> = GeneratedConditions
                .conditions(&self.images[donor], debias_cfg)?
                .into_iter()
                .flat_map(|(k, draws)| draws.into_iter().map(move |d| (k, d)))
                .collect();
            supplied.insert(self.images[i].hash(), conds);
        }
        Ok(supplied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_tag: String,
    pub bias: f64,
    pub n: usize,
    pub mean_latent_q: f64,
    pub mean_vanilla: f64,
    pub mean_debiased: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub backend_id: String,
    pub debiased: CorrelationReport,
    pub vanilla: CorrelationReport,
    pub per_class: Vec<ClassRow>,
    /// Largest minus smallest per-class mean vanilla score.
    pub vanilla_class_gap: f64,
    /// Largest minus smallest per-class mean debiased score.
    pub debiased_class_gap: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub parallelism: usize,
    pub plcc_mode: PlccMode,
    pub label: String,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            plcc_mode: PlccMode::Raw,
            label: "debiased".into(),
        }
    }
}

/// Runs the batch over `world` and writes `predictions.jsonl`,
/// `report.json`, `report_vanilla.json`, `summary.csv` and
/// `experiment.json` to `out_dir`.
pub fn evaluate_world(
    world: &SimWorld,
    backend: &dyn OracleBackend,
    cache: Option<&ResponseCache>,
    debias_cfg: &DebiasConfig,
    provider: &dyn ConditionProvider,
    opts: &ExperimentOptions,
    out_dir: &Path,
) -> Result<ExperimentReport, SimError> {
    let cfg = DebiasConfig {
        compute_vanilla: true,
        ..debias_cfg.clone()
    };
    let out = run_batch_with_provider(backend, cache, &world.entries, &cfg, opts.parallelism, provider)?;
    let n_skipped = out.skipped.len();
    let debiased = report(&out.records, &opts.label, n_skipped, opts.plcc_mode)?;
    let vanilla = vanilla_report(&out.records, n_skipped, opts.plcc_mode)?.expect("vanilla requested");
    let per_class = class_table(world, &out.records);
    let gap = |f: fn(&ClassRow) -> f64| {
        let vals: Vec<f64> = per_class.iter().map(f).collect();
        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - vals.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let exp = ExperimentReport {
        backend_id: backend.id().to_owned(),
        vanilla_class_gap: gap(|r| r.mean_vanilla),
        debiased_class_gap: gap(|r| r.mean_debiased),
        debiased,
        vanilla,
        per_class,
    };

    write_predictions(out_dir.join("predictions.jsonl"), &out.records)?;
    write_report_json(out_dir.join("report.json"), &exp.debiased)?;
    write_report_json(out_dir.join("report_vanilla.json"), &exp.vanilla)?;
    write_summary_csv(out_dir.join("summary.csv"), &[exp.debiased.clone(), exp.vanilla.clone()])?;
    let path = out_dir.join("experiment.json");
    let mut text = serde_json::to_string_pretty(&exp).expect("report serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| SimError::Io { path, source })?;
    Ok(exp)
}

fn class_table(world: &SimWorld, records: &[PredictionRecord]) -> Vec<ClassRow> {
    let by_id: BTreeMap<&str, &ManifestEntry> =
        world.entries.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let biases = world.cfg.class_biases();
    let mut acc: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = by_id[r.image_id.as_str()];
        let slot = acc.entry(e.class_tag.clone().unwrap_or_default()).or_default();
        slot.0 += 1;
        slot.1 += e.latent_q.unwrap_or(f64::NAN);
        slot.2 += r.vanilla_score.unwrap_or(f64::NAN);
        slot.3 += r.score;
    }
    acc.into_iter()
        .map(|(class_tag, (n, q, v, d))| {
            let m = n as f64;
            ClassRow {
                bias: biases.get(&class_tag).copied().unwrap_or(0.0),
                class_tag,
                n,
                mean_latent_q: q / m,
                mean_vanilla: v / m,
                mean_debiased: d / m,
            }
        })
        .collect()
}

/// Builds the world under `workdir` and evaluates it with its own mock.
pub fn run_bias_experiment(
    cfg: &SimConfig,
    mock_cfg: &MockBiasConfig,
    debias_cfg: &DebiasConfig,
    workdir: &Path,
) -> Result<ExperimentReport, SimError> {
    let world = SimWorld::build(cfg, mock_cfg, debias_cfg, workdir)?;
    evaluate_world(
        &world,
        &world.backend,
        None,
        debias_cfg,
        &GeneratedConditions,
        &ExperimentOptions::default(),
        workdir,
    )
}
