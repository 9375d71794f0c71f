//! Deterministic toy image features for demos without a neural encoder.
//!
//! The image is reduced to a 16x16 grid by box averaging; every cell
//! contributes the mean and standard deviation of each RGB channel
//! (1,536 raw values), which a seeded Gaussian projection maps to the
//! library dimension before normalization.

use base64::Engine as _;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use refdx_core::{normalize, Embedding};

use crate::error::{Result, ServiceError};

pub const GRID: usize = 16;
pub const MIN_SIDE: u32 = 32;
pub const RAW_DIM: usize = GRID * GRID * 3 * 2;

/// A fixed projection from raw grid statistics to `dim` values.
#[derive(Debug, Clone)]
pub struct Featurizer {
    dim: usize,
    seed: u64,
    /// Row-major `dim x RAW_DIM`.
    projection: Vec<f64>,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let projection = (0..dim * RAW_DIM).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        Self { dim, seed, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn featurize(&self, image: &RgbImage) -> Result<Embedding> {
        let raw = grid_stats(image)?;
        let projected: Vec<f32> = self
            .projection
            .chunks_exact(RAW_DIM)
            .map(|row| row.iter().zip(&raw).map(|(w, x)| w * x).sum::<f64>() as f32)
            .collect();
        Ok(normalize(&projected)?)
    }

    /// Decodes PNG or JPEG bytes, then featurizes.
    pub fn featurize_bytes(&self, bytes: &[u8]) -> Result<Embedding> {
        let img = image::load_from_memory(bytes).map_err(|e| ServiceError::UndecodableImage(e.to_string()))?;
        self.featurize(&img.to_rgb8())
    }

    /// Accepts standard base64, with or without a `data:...;base64,` prefix.
    pub fn featurize_base64(&self, payload: &str) -> Result<Embedding> {
        let data = payload.split_once(";base64,").map_or(payload, |(_, d)| d);
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data.trim())
            .map_err(|e| ServiceError::UndecodableImage(format!("base64: {e}")))?;
        self.featurize_bytes(&bytes)
    }
}

/// Per-cell, per-channel mean then standard deviation, cells row-major,
/// intensities scaled to [0, 1].
pub fn grid_stats(image: &RgbImage) -> Result<Vec<f64>> {
    let (w, h) = image.dimensions();
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(ServiceError::TooSmall { width: w, height: h, min: MIN_SIDE });
    }
    let bounds = |len: u32, cell: usize| {
        let len = len as usize;
        (cell * len / GRID, (cell + 1) * len / GRID)
    };
    let mut out = Vec::with_capacity(RAW_DIM);
    for cy in 0..GRID {
        let (y0, y1) = bounds(h, cy);
        for cx in 0..GRID {
            let (x0, x1) = bounds(w, cx);
            let mut sum = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = image.get_pixel(x as u32, y as u32).0;
                    for c in 0..3 {
                        let v = px[c] as f64 / 255.0;
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                out.push(sum[c] / n);
            }
            for c in 0..3 {
                let mean = sum[c] / n;
                out.push((sq[c] / n - mean * mean).max(0.0).sqrt());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(c))
    }

    #[test]
    fn constant_image_has_equal_means_and_zero_stds() {
        let stats = grid_stats(&solid(40, 33, [200, 100, 50])).unwrap();
        assert_eq!(stats.len(), RAW_DIM);
        for cell in stats.chunks_exact(6) {
            assert_eq!(&cell[..3], &[200.0 / 255.0, 100.0 / 255.0, 50.0 / 255.0]);
            assert_eq!(&cell[3..], &[0.0, 0.0, 0.0]);
        }
        let f = Featurizer::new(64, 1);
        let a = f.featurize(&solid(40, 33, [200, 100, 50])).unwrap();
        assert_eq!(a.dim(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_images_are_bit_identical() {
        let mut img = solid(64, 64, [10, 20, 30]);
        img.put_pixel(5, 7, Rgb([255, 0, 0]));
        let a = Featurizer::new(128, 3).featurize(&img).unwrap();
        let b = Featurizer::new(128, 3).featurize(&img.clone()).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn quadrant_change_lowers_similarity() {
        let a = solid(64, 64, [120, 120, 120]);
        let mut b = a.clone();
        for y in 0..32 {
            for x in 0..32 {
                b.put_pixel(x, y, Rgb([250, 10, 10]));
            }
        }
        let f = Featurizer::new(256, 0);
        let s = f.featurize(&a).unwrap().similarity(&f.featurize(&b).unwrap()).unwrap();
        assert!(s < 1.0 - 1e-4, "similarity {s}");
    }

    #[test]
    fn too_small_and_undecodable() {
        let f = Featurizer::new(16, 0);
        assert!(matches!(f.featurize(&solid(31, 64, [1, 1, 1])), Err(ServiceError::TooSmall { width: 31, .. })));
        assert!(matches!(f.featurize_bytes(b"not an image"), Err(ServiceError::UndecodableImage(_))));
        assert!(matches!(f.featurize_base64("%%%"), Err(ServiceError::UndecodableImage(_))));
    }

    #[test]
    fn png_base64_round_trip() {
        let img = solid(32, 32, [9, 80, 160]);
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        let f = Featurizer::new(32, 5);
        let direct = f.featurize(&img).unwrap();
        assert_eq!(f.featurize_base64(&b64).unwrap().values(), direct.values());
        let uri = format!("data:image/png;base64,{b64}");
        assert_eq!(f.featurize_base64(&uri).unwrap().values(), direct.values());
    }
}
