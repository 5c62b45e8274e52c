//! Grayscale raster container, geometric helpers and file I/O.
//!
//! Coordinates are `(u, v)`: `u` is the row counted downward from the top,
//! `v` the column counted rightward from the left.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel position: `u` row (downward), `v` column (rightward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: usize,
    pub v: usize,
}

impl PixelPoint {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Validates length and intensity range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension { expected: height * width, got: data.len() });
        }
        if let Some(bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    /// Builds an image from `f(u, v)`, clamping each value into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for u in 0..height {
            for v in 0..width {
                data.push(f(u, v).clamp(0.0, 1.0));
            }
        }
        Self { height, width, data }
    }

    /// Wraps `data` after clamping every value into `[0, 1]`.
    pub(crate) fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.width + v]
    }

    /// Value at a signed position, zero outside the raster.
    pub fn get_or_zero(&self, u: isize, v: isize) -> f64 {
        if u < 0 || v < 0 || u as usize >= self.height || v as usize >= self.width {
            0.0
        } else {
            self.data[u as usize * self.width + v as usize]
        }
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.width..(u + 1) * self.width]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u < self.height && p.v < self.width
    }

    /// Mirrors columns: `v ↦ width − 1 − v`.
    pub fn flip_horizontal(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.data.len());
        for u in 0..self.height {
            data.extend(self.row(u).iter().rev());
        }
        GrayImage { height: self.height, width: self.width, data }
    }

    /// `h × w` window centred at `center`; area outside the image reads 0.
    ///
    /// The window spans rows `center.u − h/2 .. center.u − h/2 + h` (integer
    /// halving) and likewise for columns, so a full-size crop at
    /// `(height/2, width/2)` reproduces the image.
    pub fn crop(&self, center: PixelPoint, h: usize, w: usize) -> GrayImage {
        self.crop_at(center.u as isize, center.v as isize, h, w)
    }

    /// As [`crop`](Self::crop) but with a signed centre that may lie outside the image.
    pub fn crop_at(&self, cu: isize, cv: isize, h: usize, w: usize) -> GrayImage {
        let u0 = cu - (h / 2) as isize;
        let v0 = cv - (w / 2) as isize;
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            let u = u0 + r as isize;
            if u < 0 || u as usize >= self.height {
                continue;
            }
            let src = self.row(u as usize);
            let dst = &mut data[r * w..(r + 1) * w];
            // Columns of the window that fall inside the source row.
            let lo = (-v0).clamp(0, w as isize) as usize;
            let hi = (self.width as isize - v0).clamp(0, w as isize) as usize;
            if lo < hi {
                let s = (v0 + lo as isize) as usize;
                dst[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
            }
        }
        GrayImage { height: h, width: w, data }
    }

    /// Columns `[v0, v1)` of every row.
    pub fn columns(&self, v0: usize, v1: usize) -> GrayImage {
        assert!(v0 <= v1 && v1 <= self.width, "column range {v0}..{v1} outside width {}", self.width);
        let mut data = Vec::with_capacity(self.height * (v1 - v0));
        for u in 0..self.height {
            data.extend_from_slice(&self.row(u)[v0..v1]);
        }
        GrayImage { height: self.height, width: v1 - v0, data }
    }

    /// Bilinear resampling with corner-aligned sampling: output index `i`
    /// samples source coordinate `i·(H−1)/(h−1)` (the centre when `h == 1`).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<GrayImage> {
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("resize target {h}x{w} must be at least 1x1")));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("cannot resize an empty image"));
        }
        let rows = sample_positions(self.height, h);
        let cols = sample_positions(self.width, w);
        let mut data = Vec::with_capacity(h * w);
        for &(r0, r1, fr) in &rows {
            let (a, b) = (self.row(r0), self.row(r1));
            for &(c0, c1, fc) in &cols {
                let top = a[c0] + (a[c1] - a[c0]) * fc;
                let bottom = b[c0] + (b[c1] - b[c0]) * fc;
                data.push(top + (bottom - top) * fr);
            }
        }
        Ok(GrayImage::from_clamped(h, w, data))
    }

    /// Writes a binary PGM (P5, maxval 255), rounding to the nearest level.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let bytes: Vec<u8> = self.data.iter().map(|&x| to_byte(x)).collect();
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)
            .and_then(|_| out.write_all(&bytes))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// For each output index: (lower source index, upper source index, weight of upper).
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 { (src - 1) as f64 / 2.0 } else { i as f64 * (src - 1) as f64 / (dst - 1) as f64 };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Loads an 8-bit grayscale PNG or binary PGM, mapping `[0, 255]` to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        Error::NotGrayscale(m) => Error::NotGrayscale(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes PNG or PGM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        Err(Error::NotGrayscale("colour PPM".into()))
    } else {
        Err(Error::UnsupportedFormat("not a PNG or binary PGM file".into()))
    }
}

fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> GrayImage {
    GrayImage { height, width, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let unsupported = |e: png::DecodingError| Error::UnsupportedFormat(format!("PNG: {e}"));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(unsupported)?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(Error::NotGrayscale(format!("PNG colour type {color:?}")));
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {depth:?}, expected 8")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedFormat("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(unsupported)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let line = info.line_size;
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        pixels.extend_from_slice(&buf[r * line..r * line + w]);
    }
    Ok(from_bytes(h, w, &pixels))
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::UnsupportedFormat(format!("PGM: {m}"));
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional '#' comments, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| bad("dimensions overflow"))?;
    let pixels = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(from_bytes(height, width, pixels))
}
