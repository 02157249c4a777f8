//! Sobel-based foreground/background patch labelling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{PatchGrid, RawImage};

/// Default magnitude threshold on the 0..=1020 Sobel scale.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 50.0;
/// Default fraction of above-threshold pixels a patch needs to be foreground.
pub const DEFAULT_MIN_EDGE_FRACTION: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error("sobel needs a single-channel image, got {0} channels")]
    NotGray(u8),
    #[error("image {width}x{height} is smaller than 3x3")]
    TooSmall { width: u32, height: u32 },
    #[error("edge map {edge_width}x{edge_height} does not match grid {grid_width}x{grid_height}")]
    Alignment {
        edge_width: u32,
        edge_height: u32,
        grid_width: u32,
        grid_height: u32,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Per-pixel gradient magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    magnitude: Vec<f64>,
}

impl EdgeMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.magnitude[y as usize * self.width as usize + x as usize]
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitude
    }

    /// Mean magnitude inside each patch, in patch-index order.
    pub fn patch_energy(&self, grid: &PatchGrid) -> Result<Vec<f64>, EdgeError> {
        self.check_grid(grid)?;
        Ok((0..grid.len())
            .map(|p| {
                let r = grid.rect(p);
                let mut sum = 0.0;
                for y in r.y..r.y + r.height {
                    for x in r.x..r.x + r.width {
                        sum += self.at(x, y);
                    }
                }
                sum / (r.width as f64 * r.height as f64)
            })
            .collect())
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<(), EdgeError> {
        if self.width != grid.image_width || self.height != grid.image_height {
            return Err(EdgeError::Alignment {
                edge_width: self.width,
                edge_height: self.height,
                grid_width: grid.image_width,
                grid_height: grid.image_height,
            });
        }
        Ok(())
    }
}

/// 3×3 Sobel gradient magnitude with replicate padding at the border.
pub fn sobel(image: &RawImage) -> Result<EdgeMap, EdgeError> {
    if image.channels() != 1 {
        return Err(EdgeError::NotGray(image.channels()));
    }
    let (w, h) = (image.width(), image.height());
    if w < 3 || h < 3 {
        return Err(EdgeError::TooSmall { width: w, height: h });
    }
    let data = image.data();
    let (wi, hi) = (w as i64, h as i64);
    let px = |x: i64, y: i64| -> f64 {
        let x = x.clamp(0, wi - 1) as usize;
        let y = y.clamp(0, hi - 1) as usize;
        data[y * w as usize + x] as f64
    };
    let mut magnitude = Vec::with_capacity(w as usize * h as usize);
    for y in 0..hi {
        for x in 0..wi {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            magnitude.push(gx.hypot(gy));
        }
    }
    Ok(EdgeMap {
        width: w,
        height: h,
        magnitude,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLabel {
    Foreground,
    Background,
}

/// One label per patch of `grid`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabels {
    pub grid: PatchGrid,
    labels: Vec<PatchLabel>,
}

impl PatchLabels {
    pub fn new(grid: PatchGrid, labels: Vec<PatchLabel>) -> Result<Self, EdgeError> {
        if labels.len() != grid.len() {
            return Err(EdgeError::InvalidParameter(format!(
                "{} labels for a grid of {} patches",
                labels.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn labels(&self) -> &[PatchLabel] {
        &self.labels
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == PatchLabel::Foreground)
            .map(|(i, _)| i)
            .collect()
    }

    /// Flat 0/1 encoding, 0 = background.
    pub fn to_bits(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| u8::from(*l == PatchLabel::Foreground))
            .collect()
    }
}

/// Labels a patch foreground iff the fraction of its pixels with magnitude
/// strictly above `threshold` strictly exceeds `min_edge_fraction`.
pub fn classify_patches(
    edges: &EdgeMap,
    grid: &PatchGrid,
    threshold: f64,
    min_edge_fraction: f64,
) -> Result<PatchLabels, EdgeError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(EdgeError::InvalidParameter(format!(
            "threshold must be >= 0, got {threshold}"
        )));
    }
    if !(0.0..=1.0).contains(&min_edge_fraction) {
        return Err(EdgeError::InvalidParameter(format!(
            "min_edge_fraction must be in [0, 1], got {min_edge_fraction}"
        )));
    }
    edges.check_grid(grid)?;
    let labels = (0..grid.len())
        .map(|p| {
            let r = grid.rect(p);
            let mut strong = 0usize;
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    if edges.at(x, y) > threshold {
                        strong += 1;
                    }
                }
            }
            let fraction = strong as f64 / (r.width as f64 * r.height as f64);
            if fraction > min_edge_fraction {
                PatchLabel::Foreground
            } else {
                PatchLabel::Background
            }
        })
        .collect();
    Ok(PatchLabels {
        grid: *grid,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub fg_fraction: f64,
    pub bg_fraction: f64,
}

pub fn partition_stats(labels: &PatchLabels) -> PartitionStats {
    let total = labels.labels.len() as f64;
    let fg = labels
        .labels
        .iter()
        .filter(|&&l| l == PatchLabel::Foreground)
        .count() as f64;
    PartitionStats {
        fg_fraction: fg / total,
        bg_fraction: (total - fg) / total,
    }
}

/// Marks every background patch of an RGB copy of `image` with a red cross.
pub fn overlay_background(image: &RawImage, labels: &PatchLabels) -> RawImage {
    let mut out = image.to_rgb();
    let width = out.width() as usize;
    let grid = labels.grid;
    let data = out.data_mut();
    for (p, label) in labels.labels.iter().enumerate() {
        if *label != PatchLabel::Background {
            continue;
        }
        let r = grid.rect(p);
        for i in 0..r.width.min(r.height) {
            for (x, y) in [(r.x + i, r.y + i), (r.x + r.width - 1 - i, r.y + i)] {
                let at = (y as usize * width + x as usize) * 3;
                data[at..at + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_grid;
    use proptest::prelude::*;

    fn vertical_step(w: u32, h: u32, split: u32) -> RawImage {
        RawImage::from_fn_gray(w, h, |x, _| if x < split { 0 } else { 255 }).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = RawImage::filled_gray(10, 8, 128).unwrap();
        let e = sobel(&img).unwrap();
        assert!(e.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn vertical_step_response() {
        let e = sobel(&vertical_step(8, 6, 4)).unwrap();
        for y in 0..6 {
            // columns 3 and 4 straddle the step: |Gx| = (1+2+1)*255
            assert_eq!(e.at(3, y), 1020.0);
            assert_eq!(e.at(4, y), 1020.0);
            assert_eq!(e.at(1, y), 0.0);
            assert_eq!(e.at(6, y), 0.0);
        }
    }

    #[test]
    fn horizontal_step_is_transpose() {
        let v = sobel(&vertical_step(8, 6, 4)).unwrap();
        let hz = sobel(&RawImage::from_fn_gray(6, 8, |_, y| if y < 4 { 0 } else { 255 }).unwrap())
            .unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(v.at(x, y), hz.at(y, x));
            }
        }
    }

    #[test]
    fn sobel_errors() {
        assert_eq!(
            sobel(&RawImage::filled_gray(2, 5, 0).unwrap()),
            Err(EdgeError::TooSmall { width: 2, height: 5 })
        );
        let rgb = RawImage::filled_gray(4, 4, 0).unwrap().to_rgb();
        assert_eq!(sobel(&rgb), Err(EdgeError::NotGray(3)));
    }

    #[test]
    fn all_zero_edges_are_background() {
        let img = RawImage::filled_gray(56, 56, 3).unwrap();
        let grid = build_grid(&img, 28).unwrap();
        let labels = classify_patches(&sobel(&img).unwrap(), &grid, 50.0, 0.01).unwrap();
        assert!(labels.labels().iter().all(|&l| l == PatchLabel::Background));
        let stats = partition_stats(&labels);
        assert_eq!((stats.fg_fraction, stats.bg_fraction), (0.0, 1.0));
    }

    #[test]
    fn degenerate_threshold_marks_noisy_image_foreground() {
        let img = RawImage::from_fn_gray(56, 84, |x, y| ((x * 31 + y * 17) % 97) as u8).unwrap();
        let grid = build_grid(&img, 28).unwrap();
        let labels = classify_patches(&sobel(&img).unwrap(), &grid, 0.0, 0.0).unwrap();
        assert!(labels.labels().iter().all(|&l| l == PatchLabel::Foreground));
    }

    #[test]
    fn stats_count_labels() {
        use PatchLabel::*;
        let grid = PatchGrid::with_dims(2, 2, 28).unwrap();
        let labels = PatchLabels::new(grid, vec![Foreground, Foreground, Background, Background])
            .unwrap();
        let s = partition_stats(&labels);
        assert_eq!((s.fg_fraction, s.bg_fraction), (0.5, 0.5));
        assert_eq!(labels.to_bits(), vec![1, 1, 0, 0]);
        assert!(PatchLabels::new(grid, vec![Foreground]).is_err());
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let img = RawImage::filled_gray(56, 56, 3).unwrap();
        let grid = PatchGrid::with_dims(3, 2, 28).unwrap();
        assert!(matches!(
            classify_patches(&sobel(&img).unwrap(), &grid, 50.0, 0.01),
            Err(EdgeError::Alignment { .. })
        ));
        let grid = PatchGrid::with_dims(2, 2, 28).unwrap();
        assert!(classify_patches(&sobel(&img).unwrap(), &grid, -1.0, 0.01).is_err());
        assert!(classify_patches(&sobel(&img).unwrap(), &grid, 1.0, 1.5).is_err());
    }

    #[test]
    fn overlay_marks_only_background() {
        use PatchLabel::*;
        let img = RawImage::filled_gray(56, 28, 0).unwrap();
        let grid = build_grid(&img, 28).unwrap();
        let labels = PatchLabels::new(grid, vec![Background, Foreground]).unwrap();
        let out = overlay_background(&img, &labels);
        assert_eq!(out.pixel(0, 0), &[255, 0, 0]);
        assert_eq!(out.pixel(27, 0), &[255, 0, 0]);
        assert_eq!(out.pixel(28, 0), &[0, 0, 0]);
        assert_eq!(out.pixel(30, 2), &[0, 0, 0]);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_foreground(
            seed in any::<u64>(),
            t1 in 0.0f64..600.0,
            dt in 0.0f64..600.0,
            frac in 0.0f64..0.3,
        ) {
            let img = RawImage::from_fn_gray(84, 56, |x, y| {
                let v = seed.wrapping_mul(6364136223846793005).wrapping_add((x * 131 + y * 7) as u64);
                if (v >> 33) % 5 == 0 { 255 } else { 40 }
            }).unwrap();
            let grid = build_grid(&img, 28).unwrap();
            let e = sobel(&img).unwrap();
            let lo = classify_patches(&e, &grid, t1, frac).unwrap();
            let hi = classify_patches(&e, &grid, t1 + dt, frac).unwrap();
            for (a, b) in lo.labels().iter().zip(hi.labels()) {
                prop_assert!(!(*a == PatchLabel::Background && *b == PatchLabel::Foreground));
            }
            let s = partition_stats(&hi);
            prop_assert!((s.fg_fraction + s.bg_fraction - 1.0).abs() <= f64::EPSILON);
        }
    }
}
