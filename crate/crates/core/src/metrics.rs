//! PSNR, SSIM and a high-frequency energy proxy, all on BT.601 luminance.

use image::RgbImage;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Radial frequency (cycles/pixel) above which power counts as high-frequency.
pub const HF_CUTOFF: f64 = 0.25;

/// `0.299 R + 0.587 G + 0.114 B` on the 0–255 scale, row-major.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!("image sizes differ: {:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    Ok(())
}

pub fn psnr_planes(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("plane lengths {} and {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    psnr_planes(&luminance(a), &luminance(b))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 Gaussian window.
pub fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("planes do not match {h}x{w}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dimensions();
    ssim_planes(&luminance(a), &luminance(b), h as usize, w as usize)
}

/// Signed frequency of DFT bin `i` out of `n`, in cycles per pixel.
fn bin_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 && !(n.is_multiple_of(2) && i == n / 2) {
        i as f64 / n as f64
    } else {
        i as f64 / n as f64 - 1.0
    }
}

/// Periodic Hann window; its DFT occupies only bins 0 and ±1.
fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Share of non-DC spectral power at radial frequency above [`HF_CUTOFF`].
///
/// The mean is removed and a separable Hann window applied first, so the
/// patch border does not register as a sharp edge of the periodic extension.
pub fn hf_energy_plane(p: &[f64], h: usize, w: usize) -> f64 {
    let mut planner = FftPlanner::<f64>::new();
    let mean = p.iter().sum::<f64>() / p.len().max(1) as f64;
    let (wy, wx) = (hann(h), hann(w));
    let mut buf: Vec<Complex<f64>> =
        p.iter().enumerate().map(|(i, &v)| Complex::new((v - mean) * wy[i / w] * wx[i % w], 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let (mut high, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if x == 0 && y == 0 {
                continue;
            }
            let power = buf[y * w + x].norm_sqr();
            total += power;
            if bin_freq(x, w).hypot(bin_freq(y, h)) > HF_CUTOFF {
                high += power;
            }
        }
    }
    // relative threshold: a constant image leaves only rounding noise
    let signal: f64 = p.iter().map(|v| v * v).sum::<f64>() * (h * w) as f64;
    if total <= 1e-20 * signal.max(1.0) {
        return 0.0;
    }
    high / total
}

pub fn hf_energy(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    hf_energy_plane(&luminance(img), h as usize, w as usize)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub hf_energy: f64,
}

/// PSNR and SSIM against `reference`, hf_energy of `img`.
pub fn evaluate(img: &RgbImage, reference: &RgbImage) -> Result<ImageMetrics> {
    Ok(ImageMetrics { psnr: psnr(img, reference)?, ssim: ssim(img, reference)?, hf_energy: hf_energy(img) })
}

/// Element-wise mean of per-image metrics.
pub fn mean_metrics(ms: &[ImageMetrics]) -> ImageMetrics {
    let n = ms.len().max(1) as f64;
    ImageMetrics {
        psnr: ms.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: ms.iter().map(|m| m.ssim).sum::<f64>() / n,
        hf_energy: ms.iter().map(|m| m.hf_energy).sum::<f64>() / n,
    }
}
