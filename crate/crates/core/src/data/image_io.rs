//! 8-bit PPM/PGM codecs, PNG via the `png` crate, and tensor conversion.
//!
//! Images become `[1, 3, H, W]` tensors in `[0, 1]`; masks become
//! `[1, 1, H, W]` binary tensors (`value > 128` is foreground).

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("truncated pixel data at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("unsupported bit depth: {0}")]
    UnsupportedDepth(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("png: {0}")]
    Png(String),
}

/// Interleaved 8-bit pixels, one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    /// Planar `[1, C, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        Tensor::from_fn(shape, |_, c, y, x| self.data[(y * self.width + x) * self.channels + c] as f32 / 255.0)
    }

    /// Three-channel tensor; gray images are replicated.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let shape = Shape::new(1, 3, self.height, self.width);
        let ch = self.channels;
        Tensor::from_fn(shape, |_, c, y, x| {
            let c = if ch == 1 { 0 } else { c };
            self.data[(y * self.width + x) * ch + c] as f32 / 255.0
        })
    }

    /// Binary `[1, 1, H, W]` mask from the first channel.
    pub fn to_mask(&self) -> Tensor {
        let shape = Shape::new(1, 1, self.height, self.width);
        Tensor::from_fn(shape, |_, _, y, x| (self.data[(y * self.width + x) * self.channels] > MASK_THRESHOLD) as u8 as f32)
    }

    /// Quantizes item `n` of a `[N, C, H, W]` tensor with `C` of 1 or 3.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.c != 1 && s.c != 3 {
            return Err(ImageError::Unsupported(format!("{} channels", s.c)));
        }
        let mut data = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    data.push(quantize(t.at(n, c, y, x)));
                }
            }
        }
        Ok(RawImage { width: s.w, height: s.h, channels: s.c, data })
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Malformed { offset: start, reason: format!("expected {what}") });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed { offset: start, reason: format!("{what} out of range") })
    }
}

/// Decodes binary P5 (gray) or P6 (RGB) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(ImageError::Malformed { offset: 0, reason: "expected magic P5 or P6".into() }),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_offset = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(if maxval == 0 || maxval > 65535 {
            ImageError::Malformed { offset: maxval_offset, reason: format!("maxval {maxval} out of range") }
        } else {
            ImageError::UnsupportedDepth(format!("maxval {maxval} (only 255 is supported)"))
        });
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(ImageError::Malformed { offset: r.pos, reason: "expected whitespace after maxval".into() }),
    }
    let expected = width * height * channels;
    let actual = bytes.len() - r.pos;
    if actual < expected {
        return Err(ImageError::Truncated { offset: r.pos, expected, actual });
    }
    Ok(RawImage { width, height, channels, data: bytes[r.pos..r.pos + expected].to_vec() })
}

/// P6 for three channels, P5 for one.
pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// 8-bit gray, gray-alpha, RGB or RGBA PNG, non-interlaced; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(ImageError::Unsupported("interlaced PNG".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedDepth(format!("{:?} bits per sample", info.bit_depth)));
    }
    let in_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImageError::Unsupported("indexed PNG".into())),
    };
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| ImageError::Png(e.to_string()))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let channels = if in_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        let row = &buf[y * frame.line_size..];
        for x in 0..width {
            data.extend_from_slice(&row[x * in_channels..x * in_channels + channels]);
        }
    }
    Ok(RawImage { width, height, channels, data })
}

pub fn encode_png(img: &RawImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
        writer.write_image_data(&img.data).map_err(|e| ImageError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Detects PNG by signature, otherwise PNM.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, ImageError> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        decode_pnm(bytes)
    }
}

pub fn read_raw(path: &Path) -> Result<RawImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io { path: path.display().to_string(), source })?;
    decode_image(&bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor, ImageError> {
    Ok(read_raw(path)?.to_rgb_tensor())
}

pub fn load_mask(path: &Path) -> Result<Tensor, ImageError> {
    Ok(read_raw(path)?.to_mask())
}

/// Writes item 0 of `t`. `.png` paths get PNG, anything else PPM/PGM.
pub fn save_image(t: &Tensor, path: &Path) -> Result<(), ImageError> {
    let raw = RawImage::from_tensor(t, 0)?;
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(&raw)? } else { encode_pnm(&raw) };
    std::fs::write(path, bytes).map_err(|source| ImageError::Io { path: path.display().to_string(), source })
}
