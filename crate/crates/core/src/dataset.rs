//! HR/LR training pairs: procedural textures or random crops from an image folder.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{apply_pipeline, random_training_pipeline, DegradationPipeline, TrainingDegradation};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, load_image};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Sinusoid,
    Checkerboard,
    Noise,
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(20.0..235.0))
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * t).round().clamp(0.0, 255.0) as u8))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`.
fn value_noise<R: Rng>(size: u32, rng: &mut R) -> Vec<f64> {
    let n = size as usize;
    let mut acc = vec![0.0; n * n];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut cell = rng.random_range(6.0..12.0);
    for _ in 0..4 {
        let g = (n as f64 / cell).ceil() as usize + 2;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        for y in 0..n {
            for x in 0..n {
                let fx = x as f64 / cell;
                let fy = y as f64 / cell;
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (smoothstep(fx.fract()), smoothstep(fy.fract()));
                let at = |i: usize, j: usize| grid[j * g + i];
                let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
                let bot = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
                acc[y * n + x] += amp * (top + (bot - top) * ty);
            }
        }
        total += amp;
        amp *= 0.55;
        cell /= 2.0;
    }
    acc.into_iter().map(|v| v / total).collect()
}

/// One `size × size` texture of the given kind.
pub fn procedural_texture<R: Rng>(kind: TextureKind, size: u32, rng: &mut R) -> RgbImage {
    let a = random_color(rng);
    let b = random_color(rng);
    match kind {
        TextureKind::Sinusoid => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let freq = rng.random_range(0.03..0.3);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (theta.cos() * freq, theta.sin() * freq, phase, rng.random_range(0.3..1.0))
                })
                .collect();
            let norm: f64 = waves.iter().map(|w| w.3).sum();
            RgbImage::from_fn(size, size, |x, y| {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin())
                    .sum();
                mix(a, b, 0.5 + 0.5 * v / norm)
            })
        }
        TextureKind::Checkerboard => {
            let cell = rng.random_range(2..=8);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            RgbImage::from_fn(size, size, |x, y| {
                let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                mix(a, b, if on { 1.0 } else { 0.0 })
            })
        }
        TextureKind::Noise => {
            let v = value_noise(size, rng);
            RgbImage::from_fn(size, size, |x, y| mix(a, b, v[(y * size + x) as usize]))
        }
    }
}

/// `count` textures cycling through every kind; a pure function of `seed`.
pub fn procedural_textures(count: usize, size: u32, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [TextureKind::Sinusoid, TextureKind::Checkerboard, TextureKind::Noise];
    (0..count).map(|i| procedural_texture(kinds[i % kinds.len()], size, &mut rng)).collect()
}

/// Random `patch × patch` crops from every PNG/JPEG in `dir` (sorted by name).
pub fn load_folder_patches(dir: &Path, patch: u32, per_image: usize, seed: u64) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in &paths {
        let img = load_image(p)?;
        if img.width() < patch || img.height() < patch {
            continue;
        }
        for _ in 0..per_image {
            let x = rng.random_range(0..=img.width() - patch);
            let y = rng.random_range(0..=img.height() - patch);
            out.push(image::imageops::crop_imm(&img, x, y, patch, patch).to_image());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no image of at least {patch}x{patch} in {}", dir.display())));
    }
    Ok(out)
}

/// Aligned HR/LR tensors in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.hr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&self) -> usize {
        self.hr.shape()[2] / self.lr.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub hr: Vec<RgbImage>,
    pub lr: Vec<RgbImage>,
}

impl PairedDataset {
    /// Degrades every HR image with its own randomly drawn training pipeline.
    pub fn synthesize(hr: Vec<RgbImage>, deg: &TrainingDegradation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = hr
            .iter()
            .map(|img| apply_pipeline(img, &random_training_pipeline(rng.random(), deg)?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(hr, lr)
    }

    /// Degrades every HR image with a fixed pipeline, re-seeded per image.
    pub fn with_pipeline(hr: Vec<RgbImage>, pipe: &DegradationPipeline) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(pipe.seed);
        let lr = hr
            .iter()
            .map(|img| apply_pipeline(img, &DegradationPipeline { seed: rng.random(), ..pipe.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(hr, lr)
    }

    pub fn from_pairs(hr: Vec<RgbImage>, lr: Vec<RgbImage>) -> Result<Self> {
        if hr.is_empty() {
            return Err(Error::EmptyDataset("no training pairs".into()));
        }
        if hr.len() != lr.len() {
            return Err(Error::Shape(format!("{} HR images but {} LR images", hr.len(), lr.len())));
        }
        let dims = (hr[0].dimensions(), lr[0].dimensions());
        if hr.iter().zip(&lr).any(|(h, l)| (h.dimensions(), l.dimensions()) != dims) {
            return Err(Error::Shape("dataset images must share one HR and one LR size".into()));
        }
        Ok(Self { hr, lr })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let pick = |v: &[RgbImage]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Ok(Batch { hr: images_to_tensor(&pick(&self.hr))?, lr: images_to_tensor(&pick(&self.lr))? })
    }

    /// `n` indices drawn without replacement (with replacement once `n` exceeds the set).
    pub fn sample_batch<T: Scalar, R: Rng>(&self, n: usize, rng: &mut R) -> Result<Batch<T>> {
        let idx: Vec<usize> = if n <= self.len() {
            let mut all: Vec<usize> = (0..self.len()).collect();
            all.partial_shuffle(rng, n);
            all.truncate(n);
            all
        } else {
            (0..n).map(|_| rng.random_range(0..self.len())).collect()
        };
        self.batch(&idx)
    }

    pub fn all<T: Scalar>(&self) -> Result<Batch<T>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}
