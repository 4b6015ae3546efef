//! Dense float image buffers with PNG and PFM I/O.
//!
//! Layout is row-major with the origin at the top-left corner, channels
//! interleaved: element `(r, c, ch)` lives at `(r * width + c) * channels + ch`.
//! PNG values map to `[0, 1]` by dividing by 255 on load; saving rounds back,
//! so 8-bit data round trips exactly. PFM holds single-channel float32 data
//! (scanlines bottom-to-top, little-endian), used for depth maps.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Dense H×W×C image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    /// Zero-filled image. Errors on any zero dimension.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::EmptyImage {
                h: height,
                w: width,
                c: channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    /// Image filled with a constant value.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        let mut img = Self::new(width, height, channels)?;
        img.data.fill(value);
        Ok(img)
    }

    /// Wraps an existing buffer; `data.len()` must equal `width*height*channels`.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::EmptyImage {
                h: height,
                w: width,
                c: channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::msg(format!(
                "buffer of {} samples does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Zero image with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels (not samples): `width * height`.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }

    /// The full shape-mismatch error against another image.
    pub(crate) fn shape_error(&self, other: &Self) -> Error {
        Error::ImageShapeMismatch {
            a_h: self.height,
            a_w: self.width,
            a_c: self.channels,
            b_h: other.height,
            b_w: other.width,
            b_c: other.channels,
        }
    }

    #[inline]
    fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        debug_assert!(r < self.height && c < self.width && ch < self.channels);
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.idx(r, c, ch)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        let i = self.idx(r, c, ch);
        self.data[i] = v;
    }

    /// All channel samples of one pixel.
    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.width + c) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Mean over all samples (pixels × channels).
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// In-place `self += w * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Self, w: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(self.shape_error(other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += w * b;
        }
        Ok(())
    }

    /// In-place multiply by a scalar.
    pub fn scale(&mut self, w: f64) {
        for a in &mut self.data {
            *a *= w;
        }
    }

    /// Clamps every sample to `[0, 1]` in place.
    pub fn clamp01(&mut self) {
        for a in &mut self.data {
            *a = a.clamp(0.0, 1.0);
        }
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(self.shape_error(other));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Box-average downsample by an integer factor that must divide both dims.
    pub fn downsample_box(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::msg(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Self::new(w, h, self.channels)?;
        let norm = 1.0 / (factor * factor) as f64;
        for r in 0..h {
            for c in 0..w {
                for ch in 0..self.channels {
                    let mut acc = 0.0;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += self.get(r * factor + dr, c * factor + dc, ch);
                        }
                    }
                    out.set(r, c, ch, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Loads a PNG as RGB (3 channels) or grayscale (1 channel), values in
    /// `[0, 1]` as `sample / 255`. Any other color type is converted to RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let dyn_img = image::open(path)?;
        match dyn_img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Self::from_vec(w, h, 1, data)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Self::from_vec(w, h, 3, data)
            }
        }
    }

    /// Saves as 8-bit PNG; 3 channels → RGB, 1 channel → grayscale.
    /// Samples are clamped to `[0, 1]` and rounded to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer sized from dims")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer sized from dims")
                .save(path)?,
            _ => {
                return Err(Error::msg(format!(
                    "cannot save {}-channel image as PNG",
                    self.channels
                )))
            }
        }
        Ok(())
    }

    /// Loads a single-channel PFM (`Pf`) file. Scanlines are stored
    /// bottom-to-top; a negative scale marks little-endian data.
    pub fn load_pfm(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let parse_err = |line: usize, what: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            what: what.to_string(),
        };
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| Error::io(path, e))?;
        if header.trim() != "Pf" {
            return Err(parse_err(1, "expected 'Pf' magic"));
        }
        let mut dims = String::new();
        reader.read_line(&mut dims).map_err(|e| Error::io(path, e))?;
        let mut it = dims.split_whitespace();
        let width: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(2, "bad width"))?;
        let height: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(2, "bad height"))?;
        let mut scale_line = String::new();
        reader
            .read_line(&mut scale_line)
            .map_err(|e| Error::io(path, e))?;
        let scale: f64 = scale_line
            .trim()
            .parse()
            .map_err(|_| parse_err(3, "bad scale"))?;
        if scale >= 0.0 {
            return Err(parse_err(3, "big-endian PFM not supported"));
        }
        let mut bytes = vec![0u8; width * height * 4];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut img = Self::new(width, height, 1)?;
        for r in 0..height {
            // PFM rows run bottom-to-top.
            let src_row = height - 1 - r;
            for c in 0..width {
                let off = (src_row * width + c) * 4;
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                img.set(r, c, 0, v as f64);
            }
        }
        Ok(img)
    }

    /// Saves a single-channel image as little-endian PFM.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::msg(format!(
                "PFM requires a single channel, got {}",
                self.channels
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let hdr = format!("Pf\n{} {}\n-1.0\n", self.width, self.height);
        w.write_all(hdr.as_bytes()).map_err(|e| Error::io(path, e))?;
        for r in (0..self.height).rev() {
            for c in 0..self.width {
                let v = self.get(r, c, 0) as f32;
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn indexing_is_row_major_interleaved() {
        let mut img = ImageF::new(4, 3, 2).unwrap();
        let (y, x, c) = (1, 2, 1);
        img.set(y, x, c, 7.5);
        assert_eq!(img.data()[(y * 4 + x) * 2 + c], 7.5);
        assert_eq!(img.get(y, x, c), 7.5);
        assert_eq!(img.pixel(y, x), &[0.0, 7.5]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ImageF::new(0, 3, 1).is_err());
        assert!(ImageF::new(3, 0, 1).is_err());
        assert!(ImageF::new(3, 3, 0).is_err());
        assert!(ImageF::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = ImageF::new(7, 5, 3).unwrap();
        for v in img.data_mut() {
            *v = rng.gen_range(0u32..=255) as f64 / 255.0;
        }
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert!(back.same_shape(&img));
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn grayscale_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let mut img = ImageF::new(3, 2, 1).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i * 40) as f64 / 255.0;
        }
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn png_save_clamps_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut img = ImageF::new(2, 1, 3).unwrap();
        img.set(0, 0, 0, -0.5);
        img.set(0, 1, 2, 1.5);
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert_eq!(back.get(0, 1, 2), 1.0);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut img = ImageF::new(6, 4, 1).unwrap();
        for v in img.data_mut() {
            // Store values that are exactly representable as f32.
            *v = rng.gen_range(-10.0f32..10.0) as f64;
        }
        img.save_pfm(&path).unwrap();
        let back = ImageF::load_pfm(&path).unwrap();
        assert!(back.same_shape(&img));
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn pfm_byte_layout_is_bottom_to_top_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pfm");
        let mut img = ImageF::new(2, 2, 1).unwrap();
        img.set(0, 0, 0, 1.0); // top-left
        img.set(0, 1, 0, 2.0);
        img.set(1, 0, 0, 3.0); // bottom-left
        img.set(1, 1, 0, 4.0);
        img.save_pfm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = b"Pf\n2 2\n-1.0\n".to_vec();
        // Bottom row first: 3, 4, then top row: 1, 2.
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn pfm_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n").unwrap();
        let err = ImageF::load_pfm(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn downsample_box_averages_blocks() {
        let img = ImageF::from_vec(
            4,
            2,
            1,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let half = img.downsample_box(2).unwrap();
        assert_eq!(half.width(), 2);
        assert_eq!(half.height(), 1);
        assert_eq!(half.get(0, 0, 0), (1.0 + 2.0 + 5.0 + 6.0) / 4.0);
        assert_eq!(half.get(0, 1, 0), (3.0 + 4.0 + 7.0 + 8.0) / 4.0);
        assert!(img.downsample_box(3).is_err());
    }

    #[test]
    fn arithmetic_helpers() {
        let mut a = ImageF::constant(2, 2, 1, 1.0).unwrap();
        let b = ImageF::constant(2, 2, 1, 2.0).unwrap();
        a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(a.get(0, 0, 0), 2.0);
        a.scale(2.0);
        assert_eq!(a.get(1, 1, 0), 4.0);
        assert_eq!(a.mean_abs_diff(&b).unwrap(), 2.0);
        let c = ImageF::constant(3, 2, 1, 0.0).unwrap();
        assert!(a.add_scaled(&c, 1.0).is_err());
    }
}
