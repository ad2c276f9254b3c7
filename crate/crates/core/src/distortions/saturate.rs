use serde::{Deserialize, Serialize};

use super::DistortionError;
use crate::image::{hsv_to_rgb, rgb_to_hsv, ImageRgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturateParams {
    /// Saturation multiplier, > 0.
    pub factor: f64,
}

impl Default for SaturateParams {
    fn default() -> Self {
        Self { factor: 2.0 }
    }
}

impl SaturateParams {
    pub(crate) fn validate(&self) -> Result<(), DistortionError> {
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(DistortionError::InvalidParams(format!(
                "saturation factor must be > 0, got {}",
                self.factor
            )));
        }
        Ok(())
    }
}

/// Scales HSV saturation by `factor`, clipped to [0, 1]; hue and value are kept.
pub fn saturate(x: &ImageRgb, p: &SaturateParams) -> Result<ImageRgb, DistortionError> {
    p.validate()?;
    let mut hsv = rgb_to_hsv(x);
    hsv.map_saturation(|s| s * p.factor);
    Ok(hsv_to_rgb(&hsv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::test_util::random_image;

    #[test]
    fn unit_factor_is_identity() {
        let x = random_image(12, 12, 8);
        let out = saturate(&x, &SaturateParams { factor: 1.0 }).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn gray_is_unchanged() {
        let x = ImageRgb::from_fn(8, 8, |r, c| [((r * 8 + c) as f64 / 64.0); 3]).unwrap();
        for factor in [0.5, 2.0, 10.0] {
            let out = saturate(&x, &SaturateParams { factor }).unwrap();
            assert!(out.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn doubles_saturation_of_muted_red() {
        // (0.6, 0.4, 0.4): v = 0.6, s = 0.2 / 0.6 = 1/3, h = 0.
        // s' = 2/3 -> min channel = v (1 - s') = 0.2, so (0.6, 0.2, 0.2).
        let x = ImageRgb::filled(8, 8, [0.6, 0.4, 0.4]).unwrap();
        let out = saturate(&x, &SaturateParams::default()).unwrap();
        let px = out.pixel(3, 3);
        for (a, b) in px.iter().zip([0.6, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-12, "{px:?}");
        }
    }

    #[test]
    fn rejects_nonpositive_factor() {
        let x = random_image(8, 8, 1);
        assert!(saturate(&x, &SaturateParams { factor: 0.0 }).is_err());
    }
}
