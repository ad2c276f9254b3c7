use serde::{Deserialize, Serialize};

use super::plasma::diamond_square;
use super::DistortionError;
use crate::image::{clip01, ImageRgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    /// Severity, >= 0.
    pub k: f64,
    /// Per-level amplitude divisor of the plasma fractal, > 1.
    pub wibble_decay: f64,
    pub seed: u64,
    /// Rescale the fogged image by `max(x) / (max(x) + k)` afterwards, as some
    /// corruption suites do. Off by default.
    #[serde(default)]
    pub modulate_by_max: bool,
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            k: 2.5,
            wibble_decay: 2.0,
            seed: 0,
            modulate_by_max: false,
        }
    }
}

impl FogParams {
    pub(crate) fn validate(&self) -> Result<(), DistortionError> {
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(DistortionError::InvalidParams(format!(
                "fog severity must be >= 0, got {}",
                self.k
            )));
        }
        if !(self.wibble_decay > 1.0 && self.wibble_decay.is_finite()) {
            return Err(DistortionError::InvalidParams(format!(
                "wibble_decay must be > 1, got {}",
                self.wibble_decay
            )));
        }
        Ok(())
    }
}

/// Fog pattern for an `h x w` image: the top-left window of a plasma fractal
/// whose side is the smallest power of two covering both dimensions.
pub fn fog_pattern(h: usize, w: usize, p: &FogParams) -> Result<Vec<f64>, DistortionError> {
    let side = h.max(w).max(2).next_power_of_two();
    let map = diamond_square(side, p.wibble_decay, p.seed)?;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend_from_slice(&map.values()[r * side..r * side + w]);
    }
    Ok(out)
}

/// `clip(x + k * F, 0, 1)` with the fog pattern broadcast across channels.
pub fn fog(x: &ImageRgb, p: &FogParams) -> Result<ImageRgb, DistortionError> {
    p.validate()?;
    let (h, w) = x.dims();
    if p.k == 0.0 {
        return Ok(x.clone());
    }
    let pattern = fog_pattern(h, w, p)?;
    let mut data: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + p.k * pattern[i / 3])
        .collect();
    if p.modulate_by_max {
        let peak = x.data().iter().copied().fold(0.0, f64::max);
        let scale = peak / (peak + p.k);
        data.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(clip01(h, w, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::test_util::random_image;

    #[test]
    fn zero_severity_is_identity() {
        let x = random_image(20, 30, 2);
        let out = fog(&x, &FogParams { k: 0.0, ..FogParams::default() }).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn white_stays_white() {
        let x = ImageRgb::filled(16, 16, [1.0; 3]).unwrap();
        let out = fog(&x, &FogParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn black_saturates_where_pattern_is_dense() {
        let p = FogParams {
            seed: 7,
            ..FogParams::default()
        };
        let x = ImageRgb::filled(24, 40, [0.0; 3]).unwrap();
        let out = fog(&x, &p).unwrap();
        let pattern = fog_pattern(24, 40, &p).unwrap();
        for (i, &f) in pattern.iter().enumerate() {
            let v = out.data()[i * 3];
            if f >= 0.4 {
                assert_eq!(v, 1.0);
            } else {
                assert!((v - 2.5 * f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn severity_is_monotone_before_clipping() {
        let x = random_image(16, 16, 5);
        let pattern = fog_pattern(16, 16, &FogParams::default()).unwrap();
        // x + k F is monotone in k because F >= 0, so clipped outputs are too.
        let mut prev = x.clone();
        for k in [0.5, 1.0, 2.5] {
            let out = fog(&x, &FogParams { k, ..FogParams::default() }).unwrap();
            for (a, b) in out.data().iter().zip(prev.data()) {
                assert!(a >= b);
            }
            prev = out;
        }
        assert!(pattern.iter().all(|&f| (0.0..=1.0).contains(&f)));
    }

    #[test]
    fn modulated_variant_stays_in_range() {
        let x = random_image(16, 16, 6);
        let p = FogParams {
            modulate_by_max: true,
            ..FogParams::default()
        };
        let out = fog(&x, &p).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out, fog(&x, &FogParams::default()).unwrap());
    }
}
