//! Semantic-preserving, quality-destroying distortions used to build
//! conditional images: zoom blur, spatter, saturation enlargement and fog.
//!
//! Every generator is a pure function of its inputs; the seeded ones own a
//! local ChaCha generator so results never depend on call order or threads.

mod fog;
mod plasma;
mod saturate;
mod spatter;
mod zoom;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImageRgb};

pub use fog::{fog, FogParams};
pub use plasma::{diamond_square, plasma_fractal, Heightmap};
pub use saturate::{saturate, SaturateParams};
pub use spatter::{generate_spatter_field, spatter, spatter_with_field, SpatterField, SpatterParams};
pub use zoom::{zoom_blur, ZoomBlurParams};

/// Smallest query image the distortion kernels accept on either axis.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("invalid distortion parameters: {0}")]
    InvalidParams(String),
    #[error("image {height}x{width} is smaller than the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum")]
    TooSmall { height: usize, width: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub(crate) fn check_min_size(x: &ImageRgb) -> Result<(), DistortionError> {
    let (height, width) = x.dims();
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(DistortionError::TooSmall { height, width });
    }
    Ok(())
}

/// The four conditional distortion families, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    ZoomBlur,
    Spatter,
    Saturate,
    Fog,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::ZoomBlur,
        DistortionKind::Spatter,
        DistortionKind::Saturate,
        DistortionKind::Fog,
    ];

    /// Short name used on the command line and in file names.
    pub fn short_name(self) -> &'static str {
        match self {
            DistortionKind::ZoomBlur => "zoom",
            DistortionKind::Spatter => "spatter",
            DistortionKind::Saturate => "saturate",
            DistortionKind::Fog => "fog",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for DistortionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zoom" | "zoom_blur" => Ok(DistortionKind::ZoomBlur),
            "spatter" => Ok(DistortionKind::Spatter),
            "saturate" | "saturation" => Ok(DistortionKind::Saturate),
            "fog" => Ok(DistortionKind::Fog),
            other => Err(format!("unknown distortion kind `{other}`")),
        }
    }
}

/// All distortion parameters together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DistortionParams {
    pub zoom: ZoomBlurParams,
    pub spatter: SpatterParams,
    pub saturate: SaturateParams,
    pub fog: FogParams,
}

impl DistortionParams {
    /// Parameters under which every distortion reduces to the identity.
    pub fn identity() -> Self {
        Self {
            zoom: ZoomBlurParams::new(vec![1.0]).expect("valid"),
            spatter: SpatterParams {
                threshold: 1.0 - 1e-9,
                noise_sigma: 1e-12,
                ..SpatterParams::default()
            },
            saturate: SaturateParams { factor: 1.0 },
            fog: FogParams {
                k: 0.0,
                ..FogParams::default()
            },
        }
    }

    /// Same parameters with both seeded generators re-seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.spatter.seed = seed;
        out.fog.seed = splitmix64(seed);
        out
    }

    pub fn validate(&self) -> Result<(), DistortionError> {
        self.zoom.validate()?;
        self.spatter.validate()?;
        self.saturate.validate()?;
        self.fog.validate()
    }

    /// Applies one distortion family.
    pub fn apply(&self, kind: DistortionKind, x: &ImageRgb) -> Result<ImageRgb, DistortionError> {
        match kind {
            DistortionKind::ZoomBlur => zoom_blur(x, &self.zoom),
            DistortionKind::Spatter => spatter(x, &self.spatter),
            DistortionKind::Saturate => saturate(x, &self.saturate),
            DistortionKind::Fog => fog(x, &self.fog),
        }
    }
}

/// One conditional image per distortion family, in [`DistortionKind::ALL`] order.
#[derive(Debug, Clone)]
pub struct ConditionalSet {
    entries: Vec<(DistortionKind, ImageRgb)>,
}

impl ConditionalSet {
    pub fn entries(&self) -> &[(DistortionKind, ImageRgb)] {
        &self.entries
    }

    pub fn get(&self, kind: DistortionKind) -> &ImageRgb {
        &self.entries[kind.index()].1
    }

    pub fn into_entries(self) -> Vec<(DistortionKind, ImageRgb)> {
        self.entries
    }
}

/// Builds all four conditional images for `x`.
pub fn make_conditional_set(
    x: &ImageRgb,
    zoom: &ZoomBlurParams,
    spat: &SpatterParams,
    sat: &SaturateParams,
    fogp: &FogParams,
) -> Result<ConditionalSet, DistortionError> {
    check_min_size(x)?;
    let entries = vec![
        (DistortionKind::ZoomBlur, zoom_blur(x, zoom)?),
        (DistortionKind::Spatter, spatter(x, spat)?),
        (DistortionKind::Saturate, saturate(x, sat)?),
        (DistortionKind::Fog, fog(x, fogp)?),
    ];
    Ok(ConditionalSet { entries })
}

/// SplitMix64 finalizer; used to decorrelate derived seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn set_has_four_entries_in_order() {
        let x = random_image(16, 20, 1);
        let p = DistortionParams::default();
        let set = make_conditional_set(&x, &p.zoom, &p.spatter, &p.saturate, &p.fog).unwrap();
        let kinds: Vec<_> = set.entries().iter().map(|(k, _)| *k).collect();
        assert_eq!(kinds, DistortionKind::ALL);
        assert!(set.entries().iter().all(|(_, img)| img.dims() == x.dims()));
    }

    #[test]
    fn default_params_change_a_natural_image() {
        let x = natural_image(48, 64);
        let p = DistortionParams::default();
        let set = make_conditional_set(&x, &p.zoom, &p.spatter, &p.saturate, &p.fog).unwrap();
        for (kind, img) in set.entries() {
            let d = img.l2_distance(&x);
            assert!(d > 0.0, "{kind} left the image unchanged");
        }
    }

    #[test]
    fn identity_parameters_reproduce_input() {
        let x = random_image(16, 16, 9);
        let p = DistortionParams::identity();
        let set = make_conditional_set(&x, &p.zoom, &p.spatter, &p.saturate, &p.fog).unwrap();
        for (kind, img) in set.entries() {
            assert!(img.max_abs_diff(&x) < 1e-6, "{kind}");
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let x = random_image(4, 16, 2);
        let p = DistortionParams::default();
        assert!(matches!(
            make_conditional_set(&x, &p.zoom, &p.spatter, &p.saturate, &p.fog),
            Err(DistortionError::TooSmall { .. })
        ));
    }

    #[test]
    fn kind_names_parse() {
        for kind in DistortionKind::ALL {
            assert_eq!(kind.short_name().parse::<DistortionKind>().unwrap(), kind);
        }
        assert!("blur".parse::<DistortionKind>().is_err());
    }
}
