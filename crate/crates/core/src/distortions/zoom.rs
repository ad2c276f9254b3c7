use serde::{Deserialize, Serialize};

use super::DistortionError;
use crate::image::{center_crop, clip01, resize_bilinear, ImageRgb};

/// Zoom factors averaged by [`zoom_blur`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomBlurParams {
    factors: Vec<f64>,
}

impl ZoomBlurParams {
    /// Factors must be non-empty, ascending and start at or above 1.
    pub fn new(factors: Vec<f64>) -> Result<Self, DistortionError> {
        let p = Self { factors };
        p.validate()?;
        Ok(p)
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub(crate) fn validate(&self) -> Result<(), DistortionError> {
        let f = &self.factors;
        if f.is_empty() {
            return Err(DistortionError::InvalidParams("no zoom factors".into()));
        }
        if f.iter().any(|z| !z.is_finite()) || f[0] < 1.0 {
            return Err(DistortionError::InvalidParams(format!(
                "zoom factors must be finite and >= 1, got {f:?}"
            )));
        }
        if f.windows(2).any(|w| w[1] < w[0]) {
            return Err(DistortionError::InvalidParams(format!(
                "zoom factors must be ascending, got {f:?}"
            )));
        }
        Ok(())
    }
}

impl Default for ZoomBlurParams {
    /// 1.00, 1.01, ..., 1.10 (eleven factors).
    fn default() -> Self {
        Self {
            factors: (0..=10).map(|i| 1.0 + i as f64 / 100.0).collect(),
        }
    }
}

/// Mean of the image zoomed by each factor and center-cropped back to size.
pub fn zoom_blur(x: &ImageRgb, p: &ZoomBlurParams) -> Result<ImageRgb, DistortionError> {
    p.validate()?;
    let (h, w) = x.dims();
    let mut acc = vec![0.0; h * w * 3];
    for &z in p.factors() {
        let zh = ((h as f64) * z).round() as usize;
        let zw = ((w as f64) * z).round() as usize;
        let zoomed = center_crop(&resize_bilinear(x, zh.max(h), zw.max(w))?, h, w)?;
        for (a, v) in acc.iter_mut().zip(zoomed.data()) {
            *a += v;
        }
    }
    let n = p.factors().len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(clip01(h, w, acc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::test_util::random_image;

    #[test]
    fn default_factors() {
        let f = ZoomBlurParams::default();
        assert_eq!(f.factors().len(), 11);
        assert_eq!(f.factors()[0], 1.0);
        assert!((f.factors()[10] - 1.10).abs() < 1e-15);
    }

    #[test]
    fn unit_factor_is_identity() {
        let x = random_image(16, 12, 4);
        let out = zoom_blur(&x, &ZoomBlurParams::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn constant_image_is_fixed() {
        let x = ImageRgb::filled(20, 20, [0.1, 0.5, 0.8]).unwrap();
        let out = zoom_blur(&x, &ZoomBlurParams::default()).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
    }

    /// Straight-line reference for two factors {1.0, 1.1} on a 16x16 image:
    /// 1.1 * 16 = 17.6 rounds to 18, so zoom to 18x18 with pixel-center
    /// bilinear sampling and take rows/cols 1..17.
    #[test]
    fn two_factor_matches_reference() {
        let x = random_image(16, 16, 21);
        let out = zoom_blur(&x, &ZoomBlurParams::new(vec![1.0, 1.1]).unwrap()).unwrap();

        let n_in = 16usize;
        let n_out = 18usize;
        let scale = n_in as f64 / n_out as f64;
        let coord = |i: usize| -> (usize, usize, f64) {
            let mut s = (i as f64 + 0.5) * scale - 0.5;
            if s < 0.0 {
                s = 0.0;
            }
            if s > (n_in - 1) as f64 {
                s = (n_in - 1) as f64;
            }
            let lo = s.floor() as usize;
            let hi = if lo + 1 < n_in { lo + 1 } else { lo };
            (lo, hi, s - lo as f64)
        };
        let mut worst: f64 = 0.0;
        for r in 0..16 {
            for c in 0..16 {
                let (r0, r1, fr) = coord(r + 1);
                let (c0, c1, fc) = coord(c + 1);
                for ch in 0..3 {
                    let v = |rr: usize, cc: usize| x.pixel(rr, cc)[ch];
                    let zoomed = (1.0 - fr) * ((1.0 - fc) * v(r0, c0) + fc * v(r0, c1))
                        + fr * ((1.0 - fc) * v(r1, c0) + fc * v(r1, c1));
                    let expected = 0.5 * (x.pixel(r, c)[ch] + zoomed);
                    worst = worst.max((expected - out.pixel(r, c)[ch]).abs());
                }
            }
        }
        assert!(worst < 1e-6, "max error {worst}");
    }

    #[test]
    fn rejects_bad_factors() {
        assert!(ZoomBlurParams::new(vec![]).is_err());
        assert!(ZoomBlurParams::new(vec![0.9, 1.0]).is_err());
        assert!(ZoomBlurParams::new(vec![1.0, 1.2, 1.1]).is_err());
    }
}
