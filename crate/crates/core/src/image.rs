//! 8-bit grayscale rasters, the binary PGM codec and simple resampling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Rounds `[0, 1]` values back to 8 bits.
    pub fn from_unit(width: usize, height: usize, v: &[f32]) -> Result<Self> {
        let px = v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(width, height, px)
    }

    /// Mask reading rule: any nonzero byte is foreground.
    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p != 0).collect()
    }

    pub fn from_mask(width: usize, height: usize, m: &[bool]) -> Result<Self> {
        Self::new(width, height, m.iter().map(|&b| if b { 255 } else { 0 }).collect())
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Binary PGM with maxval 255. Header comments are allowed.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "not a binary PGM: magic must be P5"));
    }
    let mut pos = 2;
    let field = |pos: &mut usize| -> Result<(usize, usize)> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                        *pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => *pos += 1,
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (start, v))
            .ok_or_else(|| Error::format(start, "expected a decimal header field"))
    };
    let (_, width) = field(&mut pos)?;
    let (_, height) = field(&mut pos)?;
    let (at, maxval) = field(&mut pos)?;
    if maxval != 255 {
        return Err(Error::format(at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos, "missing whitespace after header"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(2, format!("bad dimensions {width}x{height}")))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::format(
            pos + payload.len(),
            format!("truncated payload: {} of {n} bytes", payload.len()),
        ));
    }
    GrayImage::new(width, height, payload[..n].to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img))?)
}

/// Bilinear resampling of a `[h, w]` plane, half-pixel centers.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let mut out = vec![0.0; nh * nw];
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f32) {
        let c = ((i as f32 + 0.5) * m as f32 / n as f32 - 0.5).clamp(0.0, (m - 1) as f32);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(m - 1), c - lo as f32)
    };
    for y in 0..nh {
        let (y0, y1, fy) = coord(y, nh, h);
        for x in 0..nw {
            let (x0, x1, fx) = coord(x, nw, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Nearest-neighbor resampling, for masks.
pub fn resize_nearest<V: Copy>(src: &[V], h: usize, w: usize, nh: usize, nw: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = ((y * 2 + 1) * h / (2 * nh)).min(h - 1);
        for x in 0..nw {
            let sx = ((x * 2 + 1) * w / (2 * nw)).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}
