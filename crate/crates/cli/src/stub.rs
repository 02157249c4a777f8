//! Deterministic stand-in for model hidden states.
//!
//! Each patch is described by seven features: mean R, G, B, mean Sobel
//! magnitude, normalized row, normalized column and a constant 1. A seeded
//! Gaussian matrix projects them to the embedding width.

use histprune::ingest::{PatchGrid, RawImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STUB_FEATURES: usize = 7;
pub const STUB_LABEL: &str =
    "stub: patch mean RGB, mean Sobel magnitude, normalized row/col and bias, seeded Gaussian projection";

const MAX_SOBEL: f64 = 1020.0;

pub struct StubEncoder {
    dim: usize,
    projection: Vec<f64>,
    seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = gaussian(&mut rng, STUB_FEATURES * dim, 1.0 / (STUB_FEATURES as f64).sqrt());
        Self { dim, projection, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw features for every patch of an RGB image. `energy` is the mean
    /// Sobel magnitude per patch.
    pub fn features(image: &RawImage, energy: &[f64], grid: &PatchGrid) -> Vec<[f64; STUB_FEATURES]> {
        let rgb = image.to_rgb();
        let norm = |v: u32, n: u32| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        (0..grid.len())
            .map(|p| {
                let rect = grid.rect(p);
                let mut sum = [0.0; 3];
                for y in rect.y..rect.y + rect.height {
                    for x in rect.x..rect.x + rect.width {
                        for (s, &v) in sum.iter_mut().zip(rgb.pixel(x, y)) {
                            *s += v as f64;
                        }
                    }
                }
                let area = (rect.width * rect.height) as f64 * 255.0;
                let (row, col) = grid.coords(p);
                [
                    sum[0] / area,
                    sum[1] / area,
                    sum[2] / area,
                    energy[p] / MAX_SOBEL,
                    norm(row, grid.rows),
                    norm(col, grid.cols),
                    1.0,
                ]
            })
            .collect()
    }

    pub fn project(&self, features: &[[f64; STUB_FEATURES]]) -> Vec<f64> {
        let mut out = vec![0.0; features.len() * self.dim];
        for (t, f) in features.iter().enumerate() {
            for (i, &fv) in f.iter().enumerate() {
                let row = &self.projection[i * self.dim..(i + 1) * self.dim];
                for (o, w) in out[t * self.dim..(t + 1) * self.dim].iter_mut().zip(row) {
                    *o += fv * w;
                }
            }
        }
        out
    }

    pub fn encode(&self, image: &RawImage, energy: &[f64], grid: &PatchGrid) -> Vec<f64> {
        self.project(&Self::features(image, energy, grid))
    }

    /// Synthetic text-token embeddings, independent of the image stream.
    pub fn text(&self, count: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        gaussian(&mut rng, count * self.dim, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use histprune::ingest::build_grid;

    #[test]
    fn features_of_flat_image() {
        let img = RawImage::filled_gray(56, 28, 255).unwrap();
        let grid = build_grid(&img, 28).unwrap();
        let f = StubEncoder::features(&img, &[0.0, 510.0], &grid);
        assert_eq!(f[0], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f[1], [1.0, 1.0, 1.0, 0.5, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn seeded_and_shaped() {
        let img = RawImage::filled_gray(56, 56, 10).unwrap();
        let grid = build_grid(&img, 28).unwrap();
        let a = StubEncoder::new(8, 3).encode(&img, &[0.0; 4], &grid);
        let b = StubEncoder::new(8, 3).encode(&img, &[0.0; 4], &grid);
        let c = StubEncoder::new(8, 4).encode(&img, &[0.0; 4], &grid);
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(StubEncoder::new(8, 3).text(2).len(), 16);
    }
}
