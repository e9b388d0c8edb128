//! Separable resampling on float planes.
//!
//! Bicubic and bilinear follow the half-pixel-centre convention without
//! antialiasing (`align_corners = false`, cubic `a = -0.75`) and clamp source
//! indices at the border. Area resampling is adaptive average pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeKernel {
    Bicubic,
    Bilinear,
    Area,
}

impl ResizeKernel {
    pub const ALL: [ResizeKernel; 3] = [ResizeKernel::Bicubic, ResizeKernel::Bilinear, ResizeKernel::Area];
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// For each output index, the contributing `(source index, weight)` pairs.
fn taps(in_len: usize, out_len: usize, kernel: ResizeKernel) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    (0..out_len)
        .map(|o| {
            let mut t: Vec<(usize, f64)> = match kernel {
                ResizeKernel::Area => {
                    let start = (o * in_len) / out_len;
                    let end = ((o + 1) * in_len).div_ceil(out_len);
                    (start..end).map(|i| (i, 1.0)).collect()
                }
                ResizeKernel::Bilinear | ResizeKernel::Bicubic => {
                    let src = (o as f64 + 0.5) * scale - 0.5;
                    let base = src.floor();
                    let frac = src - base;
                    let base = base as isize;
                    if kernel == ResizeKernel::Bilinear {
                        vec![(clamp(base), 1.0 - frac), (clamp(base + 1), frac)]
                    } else {
                        (-1..=2).map(|k| (clamp(base + k), cubic(frac - k as f64))).collect()
                    }
                }
            };
            let sum: f64 = t.iter().map(|p| p.1).sum();
            t.iter_mut().for_each(|p| p.1 /= sum);
            t
        })
        .collect()
}

pub fn resize_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    kernel: ResizeKernel,
) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let col_taps = taps(w, out_w, kernel);
    let row_taps = taps(h, out_h, kernel);
    let mut tmp = vec![0.0f64; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, tp) in col_taps.iter().enumerate() {
            tmp[y * out_w + x] = tp.iter().map(|&(i, wt)| row[i].as_f64() * wt).sum();
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for tp in &row_taps {
        for x in 0..out_w {
            let v: f64 = tp.iter().map(|&(i, wt)| tmp[i * out_w + x] * wt).sum();
            out.push(T::lit(v));
        }
    }
    out
}

/// Resizes every plane of an NCHW tensor.
pub fn resize_tensor<T: Scalar>(
    t: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    kernel: ResizeKernel,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        data.extend(resize_plane(plane, h, w, out_h, out_w, kernel));
    }
    Tensor::from_vec([n, c, out_h, out_w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_survive_every_kernel() {
        let t = Tensor::<f64>::full([1, 2, 8, 12], 0.37);
        for k in ResizeKernel::ALL {
            for (oh, ow) in [(2, 3), (16, 24), (5, 7)] {
                let r = resize_tensor(&t, oh, ow, k).unwrap();
                assert!(r.data().iter().all(|v| (v - 0.37).abs() < 1e-12), "{k:?} {oh}x{ow}");
            }
        }
    }

    #[test]
    fn area_quarter_is_block_mean() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let t = Tensor::from_vec([1, 1, 4, 4], data).unwrap();
        let r = resize_tensor(&t, 1, 1, ResizeKernel::Area).unwrap();
        assert_eq!(r.data(), &[7.5]);
        let r = resize_tensor(&t, 2, 2, ResizeKernel::Area).unwrap();
        assert_eq!(r.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn bilinear_upsample_interpolates_linear_ramp() {
        let t = Tensor::from_vec([1, 1, 1, 4], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_tensor(&t, 1, 8, ResizeKernel::Bilinear).unwrap();
        // interior samples land at x/2 - 0.25
        assert!((r.data()[3] - 1.25).abs() < 1e-12);
        assert!((r.data()[4] - 1.75).abs() < 1e-12);
    }
}
