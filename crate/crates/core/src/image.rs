//! Single-channel image planes and label masks, plus 8-bit PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "Image::new",
                format!("{height}x{width} image needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel value with coordinates clamped into the image.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample with replicated borders.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Linear rescale of [min, max] onto [0, 255]. A constant image maps to zeros.
    pub fn normalized(&self) -> Image {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) * 255.0 / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// (1, 1, h, w) tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("image extents are consistent")
    }
}

/// Per-pixel class labels: 0 background, 1 myocardium, 2 blood pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const BACKGROUND: u8 = 0;
pub const MYOCARDIUM: u8 = 1;
pub const BLOOD_POOL: u8 = 2;
pub const NUM_CLASSES: usize = 3;

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "LabelMask::new",
                format!("{height}x{width} mask needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        LabelMask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self, cls: u8) -> usize {
        self.data.iter().filter(|&&v| v == cls).count()
    }

    /// Binary mask of pixels whose class is in `classes`.
    pub fn select(&self, classes: &[u8]) -> Vec<bool> {
        self.data.iter().map(|v| classes.contains(v)).collect()
    }
}

/// Writes an 8-bit binary PGM (P5). Values must already be integers in [0, 255].
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM (P5) as (height, width, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);

    // Header: magic, width, height, maxval separated by whitespace, with
    // optional comments, then exactly one whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM (maxval 255) is supported"));
    }
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(bad(&format!(
            "expected {} raster bytes, found {}",
            width * height,
            raster.len()
        )));
    }
    Ok((height, width, raster.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let pixels: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 3, 4, &pixels).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (3, 4, pixels));
    }

    #[test]
    fn pgm_rejects_short_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("b.pgm"));
    }

    #[test]
    fn clamped_bilinear_on_ramp() {
        let img = Image::from_fn(4, 4, |x, _| x as f64);
        assert_eq!(img.sample_clamped(1.5, 2.0), 1.5);
        assert_eq!(img.sample_clamped(-3.0, 0.0), 0.0);
        assert_eq!(img.sample_clamped(9.0, 1.0), 3.0);
    }
}
