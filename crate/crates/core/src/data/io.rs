use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mask pixels at or above this byte value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// `(1, 3, H, W)` with values `byte / 255`; grayscale files are replicated
/// across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let rgb = decode(path)?.to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

/// `(1, 1, H, W)` in `{0, 1}`: luma bytes `≥ 128` become 1.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let luma = decode(path)?.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma
        .as_raw()
        .iter()
        .map(|&b| if b >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, 1, h as usize, w as usize], data)
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = rgb.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = px[k] as f32 / 255.0;
        }
    }
    Tensor::from_parts(vec![1, 3, h as usize, w as usize], data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn single_plane<T: Scalar>(t: &Tensor<T>, channels: usize) -> Result<(u32, u32)> {
    let [n, c, h, w] = t.dims4()?;
    ensure!(
        n == 1 && c == channels,
        "expected a (1, {channels}, H, W) tensor, got {:?}",
        t.shape()
    );
    Ok((w as u32, h as u32))
}

/// Writes a binary PNG: values `≥ 0.5` become 255, others 0.
pub fn save_mask<T: Scalar>(mask: &Tensor<T>, path: &Path) -> Result<()> {
    let (w, h) = single_plane(mask, 1)?;
    let bytes = mask
        .data()
        .iter()
        .map(|v| if v.as_f64() >= 0.5 { 255 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(w, h, bytes).expect("buffer sized from shape");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a single-channel PNG with `round(255·v)`, values clamped to [0, 1].
pub fn save_gray<T: Scalar>(gray: &Tensor<T>, path: &Path) -> Result<()> {
    let (w, h) = single_plane(gray, 1)?;
    let bytes = gray.data().iter().map(|v| to_byte(v.as_f64())).collect();
    let img = GrayImage::from_raw(w, h, bytes).expect("buffer sized from shape");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes an RGB PNG from a `(1, 3, H, W)` tensor in [0, 1].
pub fn save_image<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (w, h) = single_plane(image, 3)?;
    let plane = (w * h) as usize;
    let src = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for k in 0..3 {
            bytes.push(to_byte(src[k * plane + i].as_f64()));
        }
    }
    let img = RgbImage::from_raw(w, h, bytes).expect("buffer sized from shape");
    img.save(path).map_err(|e| image_err(path, e))
}
