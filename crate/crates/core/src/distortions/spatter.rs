use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DistortionError;
use crate::image::{clip01, gaussian_blur_plane, ImageRgb};

/// Mean of the Gaussian field the spatter mask is thresholded from.
const FIELD_MEAN: f64 = 0.65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatterParams {
    pub seed: u64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Strictly inside (0, 1).
    pub threshold: f64,
    pub color: [f64; 3],
}

impl Default for SpatterParams {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_sigma: 0.3,
            blur_sigma: 1.0,
            threshold: 0.65,
            color: [0.35, 0.42, 0.5],
        }
    }
}

impl SpatterParams {
    pub(crate) fn validate(&self) -> Result<(), DistortionError> {
        let bad = |m: String| Err(DistortionError::InvalidParams(m));
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return bad(format!("blur_sigma must be > 0, got {}", self.blur_sigma));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("color must be in [0, 1]^3, got {:?}", self.color));
        }
        Ok(())
    }
}

/// Blend mask `M` and color layer `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatterField {
    height: usize,
    width: usize,
    mask: Vec<f64>,
    color_layer: ImageRgb,
}

impl SpatterField {
    /// Builds a field from an explicit mask; values are clipped to [0, 1].
    pub fn new(mask: Vec<f64>, color_layer: ImageRgb) -> Result<Self, DistortionError> {
        let (height, width) = color_layer.dims();
        if mask.len() != height * width {
            return Err(DistortionError::InvalidParams(format!(
                "mask of {} values for {height}x{width} color layer",
                mask.len()
            )));
        }
        let mask = mask.into_iter().map(|m| m.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            mask,
            color_layer,
        })
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn color_layer(&self) -> &ImageRgb {
        &self.color_layer
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask_mean(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

/// Gaussian field, blurred, thresholded, then softened by a second blur.
pub fn generate_spatter_field(
    h: usize,
    w: usize,
    p: &SpatterParams,
) -> Result<SpatterField, DistortionError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let normal = Normal::new(FIELD_MEAN, p.noise_sigma)
        .map_err(|e| DistortionError::InvalidParams(e.to_string()))?;
    let field: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
    let smooth = gaussian_blur_plane(&field, h, w, p.blur_sigma);
    let hard: Vec<f64> = smooth
        .iter()
        .map(|&g| if g >= p.threshold { 1.0 } else { 0.0 })
        .collect();
    let mask = gaussian_blur_plane(&hard, h, w, p.blur_sigma);
    let color_layer = ImageRgb::filled(h, w, p.color)?;
    SpatterField::new(mask, color_layer)
}

/// `x * (1 - M) + C * M` for a precomputed field.
pub fn spatter_with_field(x: &ImageRgb, field: &SpatterField) -> Result<ImageRgb, DistortionError> {
    if field.dims() != x.dims() {
        return Err(DistortionError::InvalidParams(format!(
            "spatter field {:?} does not match image {:?}",
            field.dims(),
            x.dims()
        )));
    }
    let c = field.color_layer.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = field.mask[i / 3];
            v * (1.0 - m) + c[i] * m
        })
        .collect();
    let (h, w) = x.dims();
    Ok(clip01(h, w, data)?)
}

pub fn spatter(x: &ImageRgb, p: &SpatterParams) -> Result<ImageRgb, DistortionError> {
    let (h, w) = x.dims();
    let field = generate_spatter_field(h, w, p)?;
    spatter_with_field(x, &field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::test_util::random_image;

    #[test]
    fn high_threshold_without_noise_gives_empty_mask() {
        let p = SpatterParams {
            threshold: 1.0 - 1e-9,
            noise_sigma: 1e-12,
            ..SpatterParams::default()
        };
        let field = generate_spatter_field(16, 16, &p).unwrap();
        assert!(field.mask().iter().all(|&m| m == 0.0));
        let x = random_image(16, 16, 3);
        assert_eq!(spatter(&x, &p).unwrap(), x);
    }

    #[test]
    fn tiny_threshold_gives_full_mask() {
        let p = SpatterParams {
            threshold: 1e-9,
            noise_sigma: 0.05,
            ..SpatterParams::default()
        };
        let field = generate_spatter_field(16, 16, &p).unwrap();
        assert!(field.mask().iter().all(|&m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn default_field_is_partial_and_reproducible() {
        let p = SpatterParams {
            seed: 42,
            ..SpatterParams::default()
        };
        let a = generate_spatter_field(32, 32, &p).unwrap();
        let b = generate_spatter_field(32, 32, &p).unwrap();
        assert_eq!(a, b);
        let mean = a.mask_mean();
        assert!(mean > 0.0 && mean < 1.0, "mask mean {mean}");
        let other = generate_spatter_field(32, 32, &SpatterParams { seed: 43, ..p }).unwrap();
        assert_ne!(a.mask(), other.mask());
    }

    #[test]
    fn blend_arithmetic() {
        let x = random_image(8, 8, 1);
        let color = ImageRgb::filled(8, 8, [0.5; 3]).unwrap();

        let zero = SpatterField::new(vec![0.0; 64], color.clone()).unwrap();
        assert_eq!(spatter_with_field(&x, &zero).unwrap(), x);

        let one = SpatterField::new(vec![1.0; 64], color.clone()).unwrap();
        assert_eq!(spatter_with_field(&x, &one).unwrap(), color);

        let black = ImageRgb::filled(8, 8, [0.0; 3]).unwrap();
        let half = SpatterField::new(vec![0.5; 64], color).unwrap();
        let out = spatter_with_field(&black, &half).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn invalid_threshold_rejected() {
        for t in [0.0, 1.0, -0.1, 1.5] {
            let p = SpatterParams {
                threshold: t,
                ..SpatterParams::default()
            };
            assert!(generate_spatter_field(8, 8, &p).is_err());
        }
    }
}
