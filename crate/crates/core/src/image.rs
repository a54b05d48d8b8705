//! 8-bit RGB rasters, binary masks and their binary PPM (P6) / PGM (P5) encodings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "raw RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn as_raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copies the `h`x`w` window at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> RgbImage {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in row..row + h {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sums[c] += u64::from(p[c]);
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        sums.map(|s| s as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask buffer does not match its dimensions"));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|b| *b = false);
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for r in row..row + h {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Mask {
            width: w,
            height: h,
            data,
        }
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += usize::from(*a && *b);
            union += usize::from(*a || *b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.name, 1, "truncated PNM header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(self.name, 1, "bad number in PNM header"))
    }
}

fn decode_pnm<'a>(bytes: &'a [u8], magic: &[u8], channels: usize, name: &'a str) -> Result<(usize, usize, &'a [u8])> {
    let mut rd = HeaderReader { bytes, pos: 0, name };
    if rd.token()? != magic {
        return Err(Error::parse(name, 1, format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let width = rd.number()?;
    let height = rd.number()?;
    let maxval = rd.number()?;
    if maxval != 255 {
        return Err(Error::parse(name, 1, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the samples
    let start = rd.pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::parse(name, 1, "truncated PNM pixel data"));
    }
    Ok((width, height, &bytes[start..start + len]))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<RgbImage> {
    let (w, h, px) = decode_pnm(bytes, b"P6", 3, name)?;
    RgbImage::from_raw(w, h, px.to_vec())
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Any nonzero gray sample is treated as set.
pub fn decode_pgm(bytes: &[u8], name: &str) -> Result<Mask> {
    let (w, h, px) = decode_pnm(bytes, b"P5", 1, name)?;
    Mask::from_vec(w, h, px.iter().map(|&v| v != 0).collect())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}
