//! Float RGB raster shared by masking, the model and the renderers.

use std::path::Path;

use crate::error::{EacError, Result};

/// Interleaved row-major image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(EacError::ShapeMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let count = (self.width * self.height).max(1) as f64;
        sums.into_iter().map(|s| (s / count) as f32).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(EacError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let rgb = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            channels: 3,
            data: rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Quantises to 8-bit RGB (round half up, clamped).
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(EacError::ShapeMismatch(format!(
                "cannot encode {} channels as RGB",
                self.channels
            )));
        }
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| EacError::ShapeMismatch("raster buffer size".into()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(EacError::from)
    }

    /// Mean filter over a `(2r+1)^2` window, clamped at the borders.
    pub fn box_blur(&self, radius: usize) -> Image {
        let (w, h, c) = (self.width, self.height, self.channels);
        let r = radius as isize;
        let mut horizontal = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0f64;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += self.data[(y * w + xx) * c + ch] as f64;
                    }
                    horizontal[(y * w + x) * c + ch] = (acc / (2 * r + 1) as f64) as f32;
                }
            }
        }
        let mut out = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0f64;
                    for dy in -r..=r {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        acc += horizontal[(yy * w + x) * c + ch] as f64;
                    }
                    out[(y * w + x) * c + ch] = (acc / (2 * r + 1) as f64) as f32;
                }
            }
        }
        Image {
            width: w,
            height: h,
            channels: c,
            data: out,
        }
    }
}
