//! Portable graymap reading and writing (P2 ASCII and P5 binary, 8 or 16 bit).

use std::fs;
use std::path::Path;

use super::{DataError, Image, Result};

struct Tokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            let b = self.data[self.pos];
            if b == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.data[start..self.pos])
    }

    fn next_uint(&mut self) -> Option<usize> {
        std::str::from_utf8(self.next()?).ok()?.parse().ok()
    }
}

/// Decodes a PGM byte stream; samples are divided by the declared maximum level.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |msg: &str| DataError::Pgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut tok = Tokens {
        data: bytes,
        pos: 0,
    };
    let binary = match tok.next() {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(err("missing P2/P5 magic")),
    };
    let width = tok.next_uint().ok_or_else(|| err("bad width"))?;
    let height = tok.next_uint().ok_or_else(|| err("bad height"))?;
    let maxval = tok.next_uint().ok_or_else(|| err("bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(err("zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err("maxval outside 1..=65535"));
    }
    let n = width * height;
    let scale = maxval as f64;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = tok.pos + 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| err("truncated raster"))?;
        if wide {
            for pair in raster.chunks_exact(2) {
                pixels.push(u16::from_be_bytes([pair[0], pair[1]]) as usize);
            }
        } else {
            pixels.extend(raster.iter().map(|&b| b as usize));
        }
    } else {
        for _ in 0..n {
            pixels.push(tok.next_uint().ok_or_else(|| err("truncated raster"))?);
        }
    }
    if pixels.iter().any(|&p| p > maxval) {
        return Err(err("sample exceeds maxval"));
    }
    Image::new(
        height,
        width,
        pixels.into_iter().map(|p| p as f64 / scale).collect(),
    )
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

/// Encodes as binary P5. Values are clamped to [0,1] and quantized to `maxval`.
pub fn encode(image: &Image, sixteen_bit: bool) -> Vec<u8> {
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    for &p in image.pixels() {
        let q = (p.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if sixteen_bit {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

pub fn write(path: &Path, image: &Image, sixteen_bit: bool) -> Result<()> {
    fs::write(path, encode(image, sixteen_bit)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
