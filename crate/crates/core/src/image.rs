use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Color image with intensities in `[0, 1]`, stored row-major as
/// `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: &[f32]) -> Self {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(width * height * color.len())
            .collect();
        Image {
            width,
            height,
            channels: color.len(),
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + p] = *v;
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.height, self.width], self.to_chw()).expect("shape")
    }

    pub fn from_chw(width: usize, height: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let plane = width * height;
        if chw.len() != plane * channels {
            return Err(Error::ShapeMismatch {
                op: "from_chw",
                lhs: vec![channels, height, width],
                rhs: vec![chw.len()],
            });
        }
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = chw[c * plane + p];
            }
        }
        Image::new(width, height, channels, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// 8-bit sRGB-agnostic quantization (values clamped to `[0, 1]`).
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(x as usize, y as usize);
            let q = |c: usize| {
                let v = px[c.min(self.channels - 1)];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data,
        }
    }
}

/// Maps depths in `[d_min, d_max]` to a blue (near) to yellow (far) ramp.
pub fn colorize_depth(values: &[f32], width: usize, height: usize, d_min: f32, d_max: f32) -> Image {
    let mut data = Vec::with_capacity(values.len() * 3);
    for &d in values {
        let t = ((d - d_min) / (d_max - d_min)).clamp(0.0, 1.0);
        data.extend_from_slice(&[t, 0.25 + 0.5 * t, 1.0 - t]);
    }
    Image {
        width,
        height,
        channels: 3,
        data,
    }
}
