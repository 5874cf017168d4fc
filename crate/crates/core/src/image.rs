//! 8-bit RGB images: PNG and a raw layout of a little-endian `u32` width,
//! a `u32` height, then `width · height` RGB byte triples in row-major
//! order.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `width · height · 3` bytes, row-major.
    pub pixels: Vec<u8>,
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.into() }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::invalid(
                "image",
                format!("{} bytes for a {width}×{height} RGB image", pixels.len()),
            ));
        }
        Ok(RgbImage { width, height, pixels })
    }

    /// Reads a PNG (detected by its signature) or a raw image.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::InvalidArgument { detail, .. } => bad(path, detail),
            other => other,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(&PNG_MAGIC) {
            Self::decode_png(bytes)
        } else {
            Self::decode_raw(bytes)
        }
    }

    pub fn decode_raw(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("image", "raw image shorter than its 8-byte header"));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let expected = width.checked_mul(height).and_then(|n| n.checked_mul(3));
        if expected != Some(bytes.len() - 8) {
            return Err(Error::invalid(
                "image",
                format!("raw header says {width}×{height} but {} pixel bytes follow", bytes.len() - 8),
            ));
        }
        Self::new(width, height, bytes[8..].to_vec())
    }

    pub fn encode_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// 8-bit grayscale, gray-alpha, RGB, RGBA or palette PNGs; alpha is
    /// dropped.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let png_err = |e: png::DecodingError| Error::invalid("image", format!("PNG: {e}"));
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::invalid("image", "PNG too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::invalid("image", format!("PNG bit depth {:?}, expected 8", info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::invalid("image", "unexpanded palette PNG")),
        };
        let mut pixels = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks(channels).take(w * h) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
        Self::new(w, h, pixels)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::invalid("image", format!("PNG: {e}"));
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&self.pixels).map_err(png_err)?;
            writer.finish().map_err(png_err)?;
        }
        Ok(out)
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            f32::from(self.pixels[p * 3 + c]) / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor), clamping to `[0, 1]` and
    /// rounding to the nearest byte.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::shape("image", format!("expected [3,H,W], got {:?}", t.shape())));
        };
        let plane = h * w;
        let mut pixels = vec![0u8; plane * 3];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, p) = (i / plane, i % plane);
            pixels[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Self::new(w, h, pixels)
    }
}
