//! Channel-major images and the `HXT1` binary format.
//!
//! Layout: ASCII `"HXT1\n"`, `u32` LE rank (always 3), the dims `C, H, W`
//! as `u32` LE, then `C·H·W` `f32` LE values in row-major `(C, H, W)` order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HXT1_MAGIC: &[u8; 5] = b"HXT1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels * height * width != pixels.len() || pixels.is_empty() {
            return Err(Error::shape(
                "image",
                &[channels, height, width],
                &[pixels.len()],
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    /// Build from `f64` values, clamping into `[0, 1]`.
    pub fn from_f64_clamped(channels: usize, height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Image::new(channels, height, width, pixels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 + 12 + 4 * self.pixels.len());
        out.extend_from_slice(HXT1_MAGIC);
        out.extend_from_slice(&3u32.to_le_bytes());
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |needed: usize| Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        };
        if bytes.len() < HXT1_MAGIC.len() || &bytes[..5] != HXT1_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "HXT1",
            });
        }
        let u32_at = |off: usize| -> Result<usize> {
            let b = bytes.get(off..off + 4).ok_or_else(|| truncated(off + 4))?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        };
        let rank = u32_at(5)?;
        if rank != 3 {
            return Err(Error::InvalidArgument(format!(
                "{}: image rank {rank}, expected 3",
                path.display()
            )));
        }
        let (c, h, w) = (u32_at(9)?, u32_at(13)?, u32_at(17)?);
        let numel = c * h * w;
        let needed = 21 + 4 * numel;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(Error::InvalidArgument(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - needed
            )));
        }
        let pixels: Vec<f32> = bytes[21..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePixel(path.to_path_buf()));
        }
        Image::new(c, h, w, pixels)
    }
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes, path)
}
