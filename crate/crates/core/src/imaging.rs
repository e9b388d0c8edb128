//! Conversions between 8-bit RGB images and float tensors, plus PNG I/O.
//!
//! Network tensors live in `[-1, 1]`; degradation works on `[0, 255]` floats.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Codec identifiers written into run metadata.
pub const PNG_CODEC: &str = "image-0.25.10/png";
pub const JPEG_CODEC: &str = "image-0.25.10/jpeg-encoder+zune-jpeg-0.5.15";

pub fn codec_versions() -> std::collections::BTreeMap<String, String> {
    [("png", PNG_CODEC), ("jpeg", JPEG_CODEC)].into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// `[1, 3, H, W]` tensor with values `v / 127.5 - 1`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let pixels = rgb_to_planes(img);
    let (w, h) = img.dimensions();
    let data = pixels.into_iter().map(|v| T::lit(v / 127.5 - 1.0)).collect();
    Tensor::from_vec([1, 3, h as usize, w as usize], data).expect("image shape")
}

/// Converts sample `n` of an NCHW tensor in `[-1, 1]` to an image, clamping and rounding.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let (batch, c, h, w) = t.dims4()?;
    if c != 3 || n >= batch {
        return Err(Error::Shape(format!("cannot take RGB image {n} from {:?}", t.shape())));
    }
    let planes: Vec<f64> = t.sample(n).iter().map(|v| (v.as_f64() + 1.0) * 127.5).collect();
    Ok(planes_to_rgb(&planes, h, w))
}

/// Channel-major `[3 * H * W]` float planes on the 0–255 scale.
pub fn rgb_to_planes(img: &RgbImage) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px.0[c] as f64;
        }
    }
    out
}

pub fn planes_to_rgb(planes: &[f64], h: usize, w: usize) -> RgbImage {
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(planes[c * plane + i])))
    })
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Batches equally sized images into `[N, 3, H, W]`.
pub fn images_to_tensor<T: Scalar>(imgs: &[RgbImage]) -> Result<Tensor<T>> {
    let ts: Vec<Tensor<T>> = imgs.iter().map(rgb_to_tensor).collect();
    Tensor::cat_batch(&ts)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec(other),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_lossless() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 50) as u8, (y * 80) as u8, 255 - (x * y) as u8]));
        let t = rgb_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(tensor_to_rgb(&t, 0).unwrap(), img);
        let planes = rgb_to_planes(&img);
        assert_eq!(planes_to_rgb(&planes, 3, 5), img);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(7, 4, |x, y| image::Rgb([x as u8 * 30, y as u8 * 60, 9]));
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
