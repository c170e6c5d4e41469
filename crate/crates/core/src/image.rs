//! RGB float images and 8-bit PNG interchange.
//!
//! Pixel values are linear floats in [0, 1]. PNG conversion is a plain
//! `x * 255` round (no gamma curve) on write and `/ 255` on read.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major H×W×C float image (C is 3 for colour, 1 for masks).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, value: [f64; 3]) -> Self {
        let mut img = Self::new(height, width, 3);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&value);
        }
        img
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                what: "image data",
                expected: height * width * channels,
                got: data.len(),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col) + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col) + ch;
        self.data[i] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = self.index(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at +0.5),
    /// clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Vec<f64> {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        (0..self.channels)
            .map(|c| {
                let a = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
                let b = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
                a * (1.0 - ty) + b * ty
            })
            .collect()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Quantizes through the 8-bit PNG representation.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self::from_u8(self.height, self.width, self.channels, &bytes).expect("same shape")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Png(format!("unsupported channel count {c}"))),
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::Png(e.to_string()))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::Png(format!("unsupported colour type {other:?}"))),
        };
        let bytes = &buf[..info.buffer_size()];
        let img = Self::from_u8(info.height as usize, info.width as usize, channels, bytes)?;
        if channels == 4 {
            Ok(img.drop_alpha())
        } else {
            Ok(img)
        }
    }

    fn drop_alpha(&self) -> Self {
        let data = self
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }
}
