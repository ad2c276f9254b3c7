//! Pixel-level primitives shared by the distortion generators.
//!
//! Images are interleaved row-major RGB with every channel a real in `[0, 1]`.
//! Quantization only happens at PNG I/O.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ImageEncoder, ImageFormat, ImageReader};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("channel value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("encode error: {0}")]
    Encode(String),
}

/// An RGB image with channels in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for ImageRgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageRgb")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl ImageRgb {
    /// Wraps an interleaved buffer, rejecting values outside `[0, 1]`.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(height, width, data.len())?;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self, ImageError> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::from_raw(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c));
            }
        }
        clip01(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Largest per-channel absolute difference to `other` (same dimensions).
    pub fn max_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.dims(), other.dims(), "dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance between the two channel buffers.
    pub fn l2_distance(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.dims(), other.dims(), "dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// 8-bit quantization used by PNG output: `round(v * 255)`, half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    /// Canonical PNG bytes (8-bit RGB, fixed encoder settings).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        let encoder =
            PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive);
        encoder
            .write_image(
                &self.to_rgb8(),
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out)
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<(), ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::InvalidSize(format!("{height}x{width}")));
    }
    if len != height * width * 3 {
        return Err(ImageError::InvalidSize(format!(
            "buffer of {len} values for {height}x{width}x3"
        )));
    }
    Ok(())
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An HSV image; hue is a fraction of a full turn in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHsv {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageHsv {
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(height, width, data.len())?;
        for (i, px) in data.chunks_exact(3).enumerate() {
            let ok = (0.0..1.0).contains(&px[0])
                && (0.0..=1.0).contains(&px[1])
                && (0.0..=1.0).contains(&px[2]);
            if !ok {
                let bad = px
                    .iter()
                    .position(|v| !(0.0..=1.0).contains(v))
                    .unwrap_or(0);
                return Err(ImageError::OutOfRange {
                    index: i * 3 + bad,
                    value: px[bad],
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Applies `f` to every saturation value, clipping the result to `[0, 1]`.
    pub fn map_saturation(&mut self, f: impl Fn(f64) -> f64) {
        for px in self.data.chunks_exact_mut(3) {
            px[1] = f(px[1]).clamp(0.0, 1.0);
        }
    }
}

/// Loads an 8- or 16-bit PNG, normalizing channels by the bit-depth maximum.
/// Alpha is discarded and grayscale is expanded to RGB.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRgb, ImageError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.exists() {
        return Err(ImageError::FileNotFound(shown));
    }
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| ImageError::Decode {
            path: shown.clone(),
            message: e.to_string(),
        })?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        Some(other) => return Err(ImageError::UnsupportedFormat(format!("{other:?}"))),
        None => {
            return Err(ImageError::Decode {
                path: shown,
                message: "not a PNG stream".into(),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| ImageError::Decode {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<ImageRgb, ImageError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
                .into_raw()
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        }
        DynamicImage::ImageRgb16(buf) => buf
            .into_raw()
            .iter()
            .map(|&b| b as f64 / 65535.0)
            .collect(),
        DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => img
            .to_rgb16()
            .into_raw()
            .iter()
            .map(|&b| b as f64 / 65535.0)
            .collect(),
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "{:?}",
                other.color()
            )))
        }
    };
    ImageRgb::from_raw(h, w, data)
}

/// Writes an 8-bit RGB PNG quantized by `round(v * 255)`.
pub fn save_png(image: &ImageRgb, path: impl AsRef<Path>) -> Result<(), ImageError> {
    std::fs::write(path, image.to_png_bytes()?)?;
    Ok(())
}

/// Decodes PNG bytes held in memory.
pub fn decode_png_bytes(bytes: &[u8]) -> Result<ImageRgb, ImageError> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| ImageError::Decode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    from_dynamic(decoded)
}

/// Standard hexcone RGB to HSV.
pub fn rgb_to_hsv(image: &ImageRgb) -> ImageHsv {
    let data = image
        .data
        .chunks_exact(3)
        .flat_map(|p| rgb_to_hsv_pixel([p[0], p[1], p[2]]))
        .collect();
    ImageHsv {
        height: image.height,
        width: image.width,
        data,
    }
}

/// Standard hexcone HSV to RGB.
pub fn hsv_to_rgb(image: &ImageHsv) -> ImageRgb {
    let data = image
        .data
        .chunks_exact(3)
        .flat_map(|p| hsv_to_rgb_pixel([p[0], p[1], p[2]]))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ImageRgb {
        height: image.height,
        width: image.width,
        data,
    }
}

pub fn rgb_to_hsv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, s, v];
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    [h, s, v]
}

pub fn hsv_to_rgb_pixel([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s <= 0.0 {
        return [v, v, v];
    }
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Bilinear resampling with pixel-center alignment and border clamping.
pub fn resize_bilinear(image: &ImageRgb, out_h: usize, out_w: usize) -> Result<ImageRgb, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidSize(format!(
            "resize target {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == image.dims() {
        return Ok(image.clone());
    }
    let rows = sample_axis(image.height, out_h);
    let cols = sample_axis(image.width, out_w);
    let w = image.width;
    let src = &image.data;
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            for ch in 0..3 {
                let at = |r: usize, c: usize| src[(r * w + c) * 3 + ch];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                data.push((top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageRgb {
        height: out_h,
        width: out_w,
        data,
    })
}

/// For each output index: (low source index, high source index, weight of high).
fn sample_axis(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    let last = (len_in - 1) as f64;
    (0..len_out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Crop window anchored at `(floor((h - out_h) / 2), floor((w - out_w) / 2))`.
pub fn center_crop(image: &ImageRgb, out_h: usize, out_w: usize) -> Result<ImageRgb, ImageError> {
    if out_h == 0 || out_w == 0 || out_h > image.height || out_w > image.width {
        return Err(ImageError::InvalidSize(format!(
            "crop {out_h}x{out_w} from {}x{}",
            image.height, image.width
        )));
    }
    let top = (image.height - out_h) / 2;
    let left = (image.width - out_w) / 2;
    crop(image, top, left, out_h, out_w)
}

pub fn crop(
    image: &ImageRgb,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<ImageRgb, ImageError> {
    if top + out_h > image.height || left + out_w > image.width || out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidSize(format!(
            "crop window {out_h}x{out_w} at ({top},{left}) from {}x{}",
            image.height, image.width
        )));
    }
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for r in top..top + out_h {
        let start = (r * image.width + left) * 3;
        data.extend_from_slice(&image.data[start..start + out_w * 3]);
    }
    Ok(ImageRgb {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Maps every value to `min(max(v, 0), 1)`; NaN becomes 0.
pub fn clip01(height: usize, width: usize, mut data: Vec<f64>) -> Result<ImageRgb, ImageError> {
    check_dims(height, width, data.len())?;
    for v in &mut data {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
    Ok(ImageRgb {
        height,
        width,
        data,
    })
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of a single plane with clamped borders.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; plane.len()];
    for r in 0..height {
        let row = &plane[r * width..(r + 1) * width];
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[clamp(c as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(r as isize + k as isize - radius, height) * width + c])
                .sum();
        }
    }
    out
}

/// Per-channel Gaussian blur.
pub fn gaussian_blur(image: &ImageRgb, sigma: f64) -> ImageRgb {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w) = image.dims();
    let mut data = vec![0.0; h * w * 3];
    for ch in 0..3 {
        let plane: Vec<f64> = image.data.iter().skip(ch).step_by(3).copied().collect();
        let blurred = gaussian_blur_plane(&plane, h, w, sigma);
        for (i, v) in blurred.into_iter().enumerate() {
            data[i * 3 + ch] = v.clamp(0.0, 1.0);
        }
    }
    ImageRgb {
        height: h,
        width: w,
        data,
    }
}

/// An image paired with its canonical PNG encoding and that encoding's SHA-256.
///
/// Cache keys and mock metadata lookups are keyed on `hash`, so two images
/// that quantize to the same bytes are the same image for those purposes.
#[derive(Clone)]
pub struct EncodedImage {
    image: ImageRgb,
    png: Vec<u8>,
    hash: String,
}

impl fmt::Debug for EncodedImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncodedImage")
            .field("dims", &self.image.dims())
            .field("hash", &self.hash)
            .finish()
    }
}

impl EncodedImage {
    pub fn new(image: ImageRgb) -> Result<Self, ImageError> {
        let png = image.to_png_bytes()?;
        let hash = hex::encode(Sha256::digest(&png));
        Ok(Self { image, png, hash })
    }

    pub fn image(&self) -> &ImageRgb {
        &self.image
    }

    pub fn png(&self) -> &[u8] {
        &self.png
    }

    /// Lowercase hex SHA-256 of the canonical PNG bytes.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// First eight bytes of the content hash as an integer.
    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash[..16], 16).expect("hex digest")
    }
}
