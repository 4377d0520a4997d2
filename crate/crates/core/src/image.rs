//! In-memory images and binary netpbm (P5/P6) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Height x width x channels, row-major, interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Converts to `channels` channels: gray is replicated, color is averaged.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        let mut out = Image::zeros(self.height, self.width, channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = match (self.channels, channels) {
                    (1, _) => self.get(y, x, 0),
                    (_, 1) => {
                        (0..self.channels).map(|c| self.get(y, x, c)).sum::<f64>()
                            / self.channels as f64
                    }
                    (from, to) => {
                        return Err(Error::invalid(format!(
                            "cannot convert {from}-channel image to {to} channels"
                        )))
                    }
                };
                for c in 0..channels {
                    out.set(y, x, c, v);
                }
            }
        }
        Ok(out)
    }
}

fn skip_ws_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_uint(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    *pos = skip_ws_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat("malformed header field".into()))
}

/// Parses a binary PGM (P5) or PPM (P6) with max value 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::ImageFormat("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let width = header_uint(bytes, &mut pos)?;
    let height = header_uint(bytes, &mut pos)?;
    let maxval = header_uint(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("max value {maxval} unsupported, need 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::ImageFormat("missing raster separator".into())),
    }
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(Error::ImageFormat(format!(
            "raster has {} bytes, header declares {expected}",
            raster.len()
        )));
    }
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(height, width, channels, data)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

/// Maps a value in [0, 1] to a byte as `round(255 * v)`, clamped.
#[inline]
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Encodes 8-bit gray values as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!(
            "pgm payload {} != {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let rgb = image.with_channels(3)?;
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    out.extend(rgb.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a field of [0, 1] values as PGM with `round(255 * v)` pixels.
pub fn write_unit_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let pixels: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    write_bytes(path, &encode_pgm(width, height, &pixels)?)
}
