//! 8-bit RGB/gray rasters and their binary PPM (P6) / PGM (P5) encodings.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel values mapped from `[0, 255]` to `[-1, 1]`, row-major `H·W·3`.
    pub fn to_signed_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of [`RgbImage::to_signed_unit`], clamping and rounding.
    pub fn from_signed_unit(width: usize, height: usize, data: &[f64]) -> Self {
        let pixels = data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        Self { width, height, pixels }
    }

    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        encode(&self.pixels, self.width, self.height, ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pnm(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Maps `values` (row-major) linearly so the minimum becomes 0 and the
    /// maximum 255. A constant map becomes all 255.
    pub fn from_heatmap(width: usize, height: usize, values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = values
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    255
                }
            })
            .collect();
        Self { width, height, pixels }
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(self.pixels[(y / factor) * self.width + x / factor]);
            }
        }
        Self { width: w, height: h, pixels }
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        encode(&self.pixels, self.width, self.height, ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()?)?;
        Ok(())
    }
}

fn encode(pixels: &[u8], w: usize, h: usize, color: ExtendedColorType, sub: PnmSubtype) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    PnmEncoder::new(&mut out)
        .with_subtype(sub)
        .write_image(pixels, w as u32, h as u32, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}
