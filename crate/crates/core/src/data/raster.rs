//! 8-bit RGB raster IO (PNG and binary PPM).

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use image::RgbImage as Raster;

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::format(path, "unsupported raster extension (expected .png or .ppm)")),
    }
}

pub fn is_raster_path(path: &Path) -> bool {
    format_for(path).is_ok()
}

/// Reads an 8-bit-per-channel raster as RGB. Grayscale is expanded and
/// alpha dropped; deeper samples are rejected.
pub fn read_rgb8(path: &Path) -> Result<RgbImage> {
    let format = format_for(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::format(path, e))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img.to_rgb8()),
        other => Err(Error::format(path, format!("expected 8-bit samples, found {other:?}"))),
    }
}

pub fn write_rgb8(path: &Path, img: &RgbImage) -> Result<()> {
    let format = format_for(path)?;
    img.save_with_format(path, format).map_err(|e| Error::format(path, e))
}

pub fn write_gray8(path: &Path, width: u32, height: u32, pixels: Vec<u8>) -> Result<()> {
    let format = format_for(path)?;
    let img = image::GrayImage::from_raw(width, height, pixels)
        .ok_or_else(|| Error::Contract("grayscale buffer does not match its dimensions".into()))?;
    img.save_with_format(path, format).map_err(|e| Error::format(path, e))
}

/// `[H, W, 3]` tensor with values in `[0, 1]`.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let scale = T::one() / T::lit(255.0);
    let data = img.as_raw().iter().map(|&v| T::lit(f64::from(v)) * scale).collect();
    Tensor::new(vec![img.height() as usize, img.width() as usize, 3], data)
        .expect("raster buffer matches its dimensions")
}
