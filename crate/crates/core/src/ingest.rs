//! Screenshot loading, resizing and patch-grid construction.
//!
//! Screenshots are resized with one of two policies and then cut into a
//! row-major lattice of square patches, one patch per visual token.

use std::path::Path;

use image::{imageops, DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Effective token footprint in pixels (14 px ViT patches merged 2×2).
pub const DEFAULT_PATCH_SIZE: u32 = 28;

/// Hard cap on decoded image dimensions.
pub const MAX_DECODE_DIMENSION: u32 = 16_384;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid resize policy: {0}")]
    InvalidPolicy(String),
    #[error("image {width}x{height} is not aligned to patch size {patch_size}")]
    Alignment {
        width: u32,
        height: u32,
        patch_size: u32,
    },
    #[error("unsupported PNG color type {0}")]
    UnsupportedColor(String),
    #[error("PNG decode failed: {0}")]
    Decode(String),
    #[error("PNG encode failed: {0}")]
    Encode(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// An 8-bit grayscale or RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, IngestError> {
        if width == 0 || height == 0 {
            return Err(IngestError::InvalidImage(format!(
                "non-positive dimensions {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(IngestError::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(IngestError::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image filled with `value`.
    pub fn filled_gray(width: u32, height: u32, value: u8) -> Result<Self, IngestError> {
        Self::new(width, height, 1, vec![value; width as usize * height as usize])
    }

    /// Builds a grayscale image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn_gray(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, IngestError> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Pixel at (x, y); one byte for grayscale, three for RGB.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let start = (y as usize * self.width as usize + x as usize) * c;
        &self.data[start..start + c]
    }

    /// Luminance conversion with weights 0.299/0.587/0.114. Grayscale input
    /// is returned as-is.
    pub fn to_gray(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RawImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Expands grayscale to RGB by channel replication.
    pub fn to_rgb(&self) -> RawImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RawImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// How a screenshot is scaled before patchification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Scale so the longer side equals `target`, then round both sides to the
    /// nearest multiple of `patch_multiple`.
    LongSide { target: u32, patch_multiple: u32 },
    /// Area-bounded resize: both sides multiples of `patch_multiple`, area
    /// within `[min_pixels, max_pixels]`.
    SmartResize {
        min_pixels: u64,
        max_pixels: u64,
        patch_multiple: u32,
    },
}

impl ResizePolicy {
    pub fn long_side(target: u32) -> Self {
        ResizePolicy::LongSide {
            target,
            patch_multiple: DEFAULT_PATCH_SIZE,
        }
    }

    /// Bounds used for the web/control benchmarks: 200,704 to 1,003,520 pixels.
    pub fn smart_default() -> Self {
        ResizePolicy::SmartResize {
            min_pixels: 200_704,
            max_pixels: 1_003_520,
            patch_multiple: DEFAULT_PATCH_SIZE,
        }
    }

    pub fn patch_multiple(&self) -> u32 {
        match *self {
            ResizePolicy::LongSide { patch_multiple, .. }
            | ResizePolicy::SmartResize { patch_multiple, .. } => patch_multiple,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let m = self.patch_multiple();
        if m == 0 {
            return Err(IngestError::InvalidPolicy("patch_multiple must be > 0".into()));
        }
        match *self {
            ResizePolicy::LongSide { target, .. } => {
                if target == 0 {
                    return Err(IngestError::InvalidPolicy("target must be > 0".into()));
                }
                if target < m {
                    return Err(IngestError::InvalidPolicy(format!(
                        "target {target} is smaller than patch_multiple {m}"
                    )));
                }
            }
            ResizePolicy::SmartResize {
                min_pixels,
                max_pixels,
                ..
            } => {
                if min_pixels >= max_pixels {
                    return Err(IngestError::InvalidPolicy(format!(
                        "min_pixels {min_pixels} must be < max_pixels {max_pixels}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Output dimensions `(width, height)` for an input of the given size.
    pub fn target_dims(&self, width: u32, height: u32) -> Result<(u32, u32), IngestError> {
        self.validate()?;
        if width == 0 || height == 0 {
            return Err(IngestError::InvalidImage(format!(
                "non-positive dimensions {width}x{height}"
            )));
        }
        let m = self.patch_multiple() as f64;
        let (w, h) = (width as f64, height as f64);
        match *self {
            ResizePolicy::LongSide { target, .. } => {
                let target_rounded = round_to_multiple(target as f64, m);
                let long = width.max(height);
                // Fixed point: already aligned with the longer side at the rounded target.
                if long == target_rounded
                    && width.is_multiple_of(self.patch_multiple())
                    && height.is_multiple_of(self.patch_multiple())
                {
                    return Ok((width, height));
                }
                let scale = target as f64 / long as f64;
                let (sw, sh) = if width >= height {
                    (target as f64, (h * scale).round())
                } else {
                    ((w * scale).round(), target as f64)
                };
                Ok((round_to_multiple(sw, m), round_to_multiple(sh, m)))
            }
            ResizePolicy::SmartResize {
                min_pixels,
                max_pixels,
                ..
            } => {
                let mut hb = round_to_multiple(h, m) as f64;
                let mut wb = round_to_multiple(w, m) as f64;
                let area = hb * wb;
                if area > max_pixels as f64 {
                    let beta = ((h * w) / max_pixels as f64).sqrt();
                    hb = ((h / beta / m).floor() * m).max(m);
                    wb = ((w / beta / m).floor() * m).max(m);
                } else if area < min_pixels as f64 {
                    let beta = (min_pixels as f64 / (h * w)).sqrt();
                    hb = (h * beta / m).ceil() * m;
                    wb = (w * beta / m).ceil() * m;
                }
                let fits = |a: f64| a >= min_pixels as f64 && a <= max_pixels as f64;
                if !fits(hb * wb) {
                    return nearest_aspect_in_bounds(w / h, min_pixels, max_pixels, self.patch_multiple())
                        .ok_or_else(|| {
                            IngestError::InvalidPolicy(format!(
                                "no multiple-of-{m} size has area in [{min_pixels}, {max_pixels}]"
                            ))
                        });
                }
                Ok((wb as u32, hb as u32))
            }
        }
    }
}

/// Aligned `(width, height)` with area in bounds whose aspect ratio is
/// closest to `aspect` (width / height) in log scale. Used when the scaled
/// rounding of a narrow pixel range falls outside it.
fn nearest_aspect_in_bounds(aspect: f64, min_pixels: u64, max_pixels: u64, m: u32) -> Option<(u32, u32)> {
    let m64 = m as u64;
    let mut best: Option<(f64, u32, u32)> = None;
    for i in 1..=max_pixels / (m64 * m64) {
        let hb = i * m64;
        let lo = min_pixels.div_ceil(hb * m64).max(1);
        let hi = max_pixels / (hb * m64);
        if lo > hi {
            continue;
        }
        let ideal = (hb as f64 * aspect / m as f64).round() as u64;
        let j = ideal.clamp(lo, hi);
        let wb = j * m64;
        let err = ((wb as f64 / hb as f64) / aspect).ln().abs();
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, wb as u32, hb as u32));
        }
    }
    best.map(|(_, w, h)| (w, h))
}

/// Nearest multiple of `m`, at least one multiple. Halves round up.
fn round_to_multiple(value: f64, m: f64) -> u32 {
    let k = (value / m).round().max(1.0);
    (k * m) as u32
}

/// Resizes `image` under `policy` using bilinear (triangle) resampling.
/// Images already at the policy's output size are returned unchanged.
pub fn resize(image: &RawImage, policy: &ResizePolicy) -> Result<RawImage, IngestError> {
    let (tw, th) = policy.target_dims(image.width, image.height)?;
    if tw == image.width && th == image.height {
        return Ok(image.clone());
    }
    let data = match image.channels {
        1 => {
            let buf: GrayImage =
                ImageBuffer::from_raw(image.width, image.height, image.data.clone())
                    .expect("buffer length checked at construction");
            imageops::resize(&buf, tw, th, imageops::FilterType::Triangle).into_raw()
        }
        _ => {
            let buf: RgbImage =
                ImageBuffer::from_raw(image.width, image.height, image.data.clone())
                    .expect("buffer length checked at construction");
            imageops::resize(&buf, tw, th, imageops::FilterType::Triangle).into_raw()
        }
    };
    RawImage::new(tw, th, image.channels, data)
}

/// Pixel rectangle covered by one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Row-major lattice of square patches over a resized screenshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
    pub patch_size: u32,
    pub image_width: u32,
    pub image_height: u32,
}

impl PatchGrid {
    /// Grid of `rows`×`cols` patches of `patch_size` pixels.
    pub fn with_dims(rows: u32, cols: u32, patch_size: u32) -> Result<Self, IngestError> {
        if rows == 0 || cols == 0 || patch_size == 0 {
            return Err(IngestError::InvalidImage(format!(
                "degenerate grid {rows}x{cols} with patch size {patch_size}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            patch_size,
            image_width: cols * patch_size,
            image_height: rows * patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of patch `index`.
    pub fn coords(&self, index: usize) -> (u32, u32) {
        let cols = self.cols as usize;
        ((index / cols) as u32, (index % cols) as u32)
    }

    pub fn index(&self, row: u32, col: u32) -> usize {
        row as usize * self.cols as usize + col as usize
    }

    pub fn rect(&self, index: usize) -> PixelRect {
        let (row, col) = self.coords(index);
        PixelRect {
            x: col * self.patch_size,
            y: row * self.patch_size,
            width: self.patch_size,
            height: self.patch_size,
        }
    }

    /// Patch index containing pixel (x, y).
    pub fn patch_at(&self, x: u32, y: u32) -> Option<usize> {
        if x >= self.image_width || y >= self.image_height {
            return None;
        }
        Some(self.index(y / self.patch_size, x / self.patch_size))
    }

    pub fn diagonal(&self) -> f64 {
        (self.rows as f64).hypot(self.cols as f64)
    }
}

/// Cuts an already-aligned image into a patch grid.
pub fn build_grid(image: &RawImage, patch_size: u32) -> Result<PatchGrid, IngestError> {
    if patch_size == 0
        || !image.width.is_multiple_of(patch_size)
        || !image.height.is_multiple_of(patch_size)
    {
        return Err(IngestError::Alignment {
            width: image.width,
            height: image.height,
            patch_size,
        });
    }
    Ok(PatchGrid {
        rows: image.height / patch_size,
        cols: image.width / patch_size,
        patch_size,
        image_width: image.width,
        image_height: image.height,
    })
}

/// Decodes an 8-bit grayscale or RGB PNG. Alpha channels are dropped.
pub fn decode_png(bytes: &[u8]) -> Result<RawImage, IngestError> {
    let mut reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png);
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_DECODE_DIMENSION);
    limits.max_image_height = Some(MAX_DECODE_DIMENSION);
    limits.max_alloc = Some(256 * 1024 * 1024);
    reader.limits(limits);
    let decoded = reader
        .decode()
        .map_err(|e| IngestError::Decode(e.to_string()))?;
    let (w, h) = (decoded.width(), decoded.height());
    match decoded {
        DynamicImage::ImageLuma8(buf) => RawImage::new(w, h, 1, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => RawImage::new(w, h, 1, decoded.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(buf) => RawImage::new(w, h, 3, buf.into_raw()),
        DynamicImage::ImageRgba8(_) => RawImage::new(w, h, 3, decoded.to_rgb8().into_raw()),
        other => Err(IngestError::UnsupportedColor(format!("{:?}", other.color()))),
    }
}

pub fn load_png(path: &Path) -> Result<RawImage, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

pub fn encode_png(image: &RawImage) -> Result<Vec<u8>, IngestError> {
    let mut out = std::io::Cursor::new(Vec::new());
    let result = match image.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(image.width, image.height, image.data.as_slice())
            .expect("buffer length checked at construction")
            .write_to(&mut out, ImageFormat::Png),
        _ => ImageBuffer::<Rgb<u8>, _>::from_raw(image.width, image.height, image.data.as_slice())
            .expect("buffer length checked at construction")
            .write_to(&mut out, ImageFormat::Png),
    };
    result.map_err(|e| IngestError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(image: &RawImage, path: &Path) -> Result<(), IngestError> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}
