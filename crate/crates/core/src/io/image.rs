//! Linear-light images and their 8-bit sRGB PNG form on disk.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image in linear color, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "{} pixels do not fill {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }
}

/// One sRGB byte to linear light.
pub fn srgb_to_linear(byte: u8) -> f64 {
    let c = byte as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear light to the nearest sRGB byte; out-of-range values clamp.
pub fn linear_to_srgb(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let c = if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (c * 255.0).round() as u8
}

/// Collapses an image to what the 8-bit file keeps: encode to sRGB bytes and
/// decode back. Comparing a render against a stored frame goes through this
/// so exact reconstructions score exactly as such.
pub fn quantize(image: &Image) -> Image {
    Image {
        width: image.width,
        height: image.height,
        pixels: image
            .pixels
            .iter()
            .map(|p| {
                [
                    srgb_to_linear(linear_to_srgb(p[0])),
                    srgb_to_linear(linear_to_srgb(p[1])),
                    srgb_to_linear(linear_to_srgb(p[2])),
                ]
            })
            .collect(),
    }
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.pixels.len() * 3);
    for p in &image.pixels {
        bytes.push(linear_to_srgb(p[0]));
        bytes.push(linear_to_srgb(p[1]));
        bytes.push(linear_to_srgb(p[2]));
    }
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::data_at(path, "image dimensions overflow"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data_at(path, format!("PNG encode failed: {e}")))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::data_at(path, format!("PNG decode failed: {e}")))?
        .to_rgb8();
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = decoded
        .pixels()
        .map(|p| {
            [
                srgb_to_linear(p.0[0]),
                srgb_to_linear(p.0[1]),
                srgb_to_linear(p.0[2]),
            ]
        })
        .collect();
    Image::new(width, height, pixels)
}
