//! 8-bit interleaved pixel buffers with PNG I/O.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Copy a `size x size` window at `(x0, y0)`; pixels beyond the source
    /// are filled with `pad`.
    pub fn crop_padded(&self, x0: usize, y0: usize, size: usize, pad: u8) -> Raster {
        let mut out = Raster::filled(size, size, self.channels, pad);
        let w = size.min(self.width.saturating_sub(x0));
        let h = size.min(self.height.saturating_sub(y0));
        let c = self.channels;
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * c;
            let dst = y * size * c;
            out.data[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
        }
        out
    }

    /// First channel as `f64` in `[0, 1]`, row-major.
    pub fn luma_f64(&self) -> Vec<f64> {
        self.data.chunks(self.channels).map(|px| px[0] as f64 / 255.0).collect()
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let img = image::open(path).map_err(|e| Error::format(path, e))?;
        let raster = match img.color() {
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
                let g = img.to_luma8();
                Raster {
                    width: g.width() as usize,
                    height: g.height() as usize,
                    channels: 1,
                    data: g.into_raw(),
                }
            }
            _ => {
                let rgb = img.to_rgb8();
                Raster {
                    width: rgb.width() as usize,
                    height: rgb.height() as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        };
        Ok(raster)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let img = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.clone()).map(DynamicImage::ImageLuma8),
            3 => image::RgbImage::from_raw(w, h, self.data.clone()).map(DynamicImage::ImageRgb8),
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot encode {c}-channel raster as PNG"
                )))
            }
        }
        .ok_or_else(|| Error::InvalidArgument("raster buffer size mismatch".into()))?;
        img.save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::format(path, e))
    }
}
