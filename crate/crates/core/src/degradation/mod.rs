//! Synthetic LR generation: blur, resize, additive noise and JPEG stages.

pub mod resize;

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{planes_to_rgb, rgb_to_planes};
pub use resize::ResizeKernel;

/// Kernel size used by every blur stage.
pub const BLUR_KERNEL_SIZE: usize = 21;

/// Channel-major float image on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self { channels: 3, height: h as usize, width: w as usize, data: rgb_to_planes(img) }
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("{} channels is not RGB", self.channels)));
        }
        Ok(planes_to_rgb(&self.data, self.height, self.width))
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn map_planes(&self, out_h: usize, out_w: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let data = (0..self.channels).flat_map(|c| f(self.plane(c))).collect();
        Self { channels: self.channels, height: out_h, width: out_w, data }
    }

    fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Stage {
    Blur { sigma: f64 },
    Resize { scale: f64, kernel: ResizeKernel },
    GaussianNoise { sigma: f64 },
    Jpeg { quality: u8 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationPipeline {
    pub stages: Vec<Stage>,
    pub seed: u64,
}

pub const NAMED_PIPELINES: [&str; 4] = ["sr4", "blur2_sr4", "sr4_noise40", "blur2_sr4_noise20_jpeg50"];

impl DegradationPipeline {
    pub fn new(stages: Vec<Stage>, seed: u64) -> Self {
        Self { stages, seed }
    }

    /// One of the fixed evaluation pipelines listed in [`NAMED_PIPELINES`].
    pub fn named(name: &str, seed: u64) -> Result<Self> {
        let sr4 = Stage::Resize { scale: 0.25, kernel: ResizeKernel::Bicubic };
        let blur2 = Stage::Blur { sigma: 2.0 };
        let stages = match name {
            "sr4" => vec![sr4],
            "blur2_sr4" => vec![blur2, sr4],
            "sr4_noise40" => vec![sr4, Stage::GaussianNoise { sigma: 40.0 }],
            "blur2_sr4_noise20_jpeg50" => {
                vec![blur2, sr4, Stage::GaussianNoise { sigma: 20.0 }, Stage::Jpeg { quality: 50 }]
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown pipeline `{other}`, expected one of {NAMED_PIPELINES:?}"
                )))
            }
        };
        Ok(Self { stages, seed })
    }

    /// Output size for an `h × w` input, or an error when a resize lands off the pixel grid.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for stage in &self.stages {
            stage.validate()?;
            if let Stage::Resize { scale, .. } = *stage {
                h = scaled_len(h, scale)?;
                w = scaled_len(w, scale)?;
            }
        }
        Ok((h, w))
    }
}

impl Stage {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Stage::Blur { sigma } => sigma > 0.0 && sigma.is_finite(),
            Stage::Resize { scale, .. } => scale > 0.0 && scale.is_finite(),
            Stage::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Stage::Jpeg { quality } => (1..=100).contains(&quality),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid stage {self:?}")))
        }
    }
}

fn scaled_len(len: usize, scale: f64) -> Result<usize> {
    let out = len as f64 * scale;
    let rounded = out.round();
    if rounded < 1.0 || (out - rounded).abs() > 1e-9 {
        return Err(Error::invalid(format!("dimension {len} is not divisible by the downscale factor {}", 1.0 / scale)));
    }
    Ok(rounded as usize)
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::invalid(format!("blur kernel size {size} must be odd")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be positive")));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / sum).collect())
}

/// Row-major `size × size` kernel.
pub fn gaussian_kernel_2d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    let k = gaussian_kernel_1d(sigma, size)?;
    Ok(k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect())
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub fn gaussian_blur(img: &FloatImage, sigma: f64, kernel_size: usize) -> Result<FloatImage> {
    let k = gaussian_kernel_1d(sigma, kernel_size)?;
    let r = (kernel_size / 2) as isize;
    let (h, w) = (img.height, img.width);
    Ok(img.map_planes(h, w, |src| {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    }))
}

pub fn resize_image(img: &FloatImage, out_h: usize, out_w: usize, kernel: ResizeKernel) -> FloatImage {
    img.map_planes(out_h, out_w, |p| resize::resize_plane(p, img.height, img.width, out_h, out_w, kernel))
}

/// Adds i.i.d. `N(0, sigma²)` noise to every sample.
pub fn add_gaussian_noise<R: Rng>(img: &FloatImage, sigma: f64, rng: &mut R) -> FloatImage {
    let mut out = img.clone();
    for v in &mut out.data {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    out
}

/// Baseline JPEG encode and decode.
pub fn jpeg_roundtrip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("JPEG quality {quality} outside 1..=100")));
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(img)?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)?;
    Ok(decoded.to_rgb8())
}

/// Runs every stage in order on an 8-bit image.
pub fn apply_pipeline(hr: &RgbImage, pipe: &DegradationPipeline) -> Result<RgbImage> {
    let (h, w) = (hr.height() as usize, hr.width() as usize);
    pipe.output_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pipe.seed);
    let mut img = FloatImage::from_rgb(hr);
    for stage in &pipe.stages {
        img = match *stage {
            Stage::Blur { sigma } => gaussian_blur(&img, sigma, BLUR_KERNEL_SIZE)?,
            Stage::Resize { scale, kernel } => {
                let oh = scaled_len(img.height, scale)?;
                let ow = scaled_len(img.width, scale)?;
                resize_image(&img, oh, ow, kernel)
            }
            Stage::GaussianNoise { sigma } => {
                img.clamp();
                add_gaussian_noise(&img, sigma, &mut rng)
            }
            Stage::Jpeg { quality } => FloatImage::from_rgb(&jpeg_roundtrip(&img.to_rgb()?, quality)?),
        };
    }
    img.to_rgb()
}

/// Parameter ranges for the randomized training degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingDegradation {
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
    pub kernels: Vec<ResizeKernel>,
    /// Total downscale factor across all passes.
    pub scale: u32,
    /// Number of sampled blur/resize/noise/JPEG passes.
    pub order: u32,
}

impl Default for TrainingDegradation {
    fn default() -> Self {
        Self {
            blur_sigma: [0.2, 3.0],
            noise_sigma: [1.0, 30.0],
            jpeg_quality: [30, 95],
            kernels: ResizeKernel::ALL.to_vec(),
            scale: 4,
            order: 1,
        }
    }
}

impl TrainingDegradation {
    pub fn validate(&self) -> Result<()> {
        let [b0, b1] = self.blur_sigma;
        let [n0, n1] = self.noise_sigma;
        let [q0, q1] = self.jpeg_quality;
        let per_pass = (self.scale as f64).powf(1.0 / self.order.max(1) as f64);
        let checks = [
            (b0 > 0.0 && b0 <= b1 && b1.is_finite(), "blur_sigma"),
            (n0 >= 0.0 && n0 <= n1 && n1.is_finite(), "noise_sigma"),
            (q0 >= 1 && q0 <= q1 && q1 <= 100, "jpeg_quality"),
            (!self.kernels.is_empty(), "kernels"),
            (self.order >= 1 && self.scale >= 1 && (per_pass - per_pass.round()).abs() < 1e-9, "scale/order"),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, field)) => Err(Error::Config(format!("invalid training degradation range `{field}`: {self:?}"))),
            None => Ok(()),
        }
    }
}

/// Samples each stage parameter uniformly from `cfg`; a pure function of `seed`.
pub fn random_training_pipeline(seed: u64, cfg: &TrainingDegradation) -> Result<DegradationPipeline> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_pass = (cfg.scale as f64).powf(1.0 / cfg.order as f64).round();
    let mut stages = Vec::new();
    for _ in 0..cfg.order {
        let blur = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        let kernel = cfg.kernels[rng.random_range(0..cfg.kernels.len())];
        let noise = rng.random_range(cfg.noise_sigma[0]..=cfg.noise_sigma[1]);
        let quality = rng.random_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]);
        stages.extend([
            Stage::Blur { sigma: blur },
            Stage::Resize { scale: 1.0 / per_pass, kernel },
            Stage::GaussianNoise { sigma: noise },
            Stage::Jpeg { quality },
        ]);
    }
    Ok(DegradationPipeline { stages, seed: rng.random() })
}
