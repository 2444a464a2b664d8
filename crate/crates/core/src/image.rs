//! Planar float images and the resampling operators shared by both phases.
//!
//! Pixel values live in `[-1, 1]`. Conversion to and from 8-bit uses
//! `v = u / 127.5 - 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bicubic,
    Bilinear,
}

/// A `channels x height x width` image stored plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Mean pooling over non-overlapping `factor x factor` blocks.
    pub fn area_downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::InvalidFactor(factor));
        }
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Image::zeros(self.channels, h, w);
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(c, y * factor + dy, x * factor + dx) as f64;
                        }
                    }
                    out.set(c, y, x, (acc * norm) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Separable resampling to `height x width` with half-pixel centres and
    /// clamp-to-edge borders. No output clamping is applied.
    pub fn resize(&self, height: usize, width: usize, method: Interpolation) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = resample_taps(self.height, height, method);
        let cols = resample_taps(self.width, width, method);
        let mut tmp = vec![0f32; self.channels * self.height * width];
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..self.height {
                let row = &src[y * self.width..(y + 1) * self.width];
                let dst = &mut tmp[(c * self.height + y) * width..(c * self.height + y + 1) * width];
                for (x, taps) in cols.iter().enumerate() {
                    dst[x] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
                }
            }
        }
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = &tmp[c * self.height * width..(c + 1) * self.height * width];
            let dst = out.plane_mut(c);
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..width {
                    dst[y * width + x] = taps.iter().map(|&(i, wt)| src[i * width + x] * wt).sum();
                }
            }
        }
        out
    }

    /// Interpolating upscale by an integer factor, clamped to `[-1, 1]`.
    pub fn upscale(&self, factor: usize, method: Interpolation) -> Result<Image> {
        if factor == 0 {
            return Err(Error::InvalidFactor(factor));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let mut out = self.resize(self.height * factor, self.width * factor, method);
        out.clamp_unit();
        Ok(out)
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let start = (c * self.height + y) * self.width;
                out.data[start..start + self.width].reverse();
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = (c * self.height + top + y) * self.width + left;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }

    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(Error::CropTooLarge {
                crop: size,
                height: self.height,
                width: self.width,
            });
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    /// Interleaved 8-bit RGB, replicating a single channel if needed.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                let src = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
                out.push(to_u8(self.data[src * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {height}x{width} RGB image",
                rgb.len()
            )));
        }
        let n = height * width;
        let mut img = Image::zeros(3, height, width);
        for i in 0..n {
            for c in 0..3 {
                img.data[c * n + i] = rgb[i * 3 + c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(img)
    }

    /// Snap values onto the 8-bit grid so that an encode/decode round trip is
    /// lossless.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 127.5 - 1.0;
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(err)?;
        writer.finish().map_err(err)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let err = |e: png::DecodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingData(format!("{} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(err)?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            message: "image too large".into(),
        })?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: "indexed PNG was not expanded".into(),
                })
            }
        };
        Image::from_rgb8(h, w, &rgb)
    }
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn cubic_weight(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate, normalised to sum to
/// one so that constant inputs stay constant.
fn resample_taps(src: usize, dst: usize, method: Interpolation) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f32 / dst as f32;
    let last = src as isize - 1;
    (0..dst)
        .map(|o| {
            let centre = (o as f32 + 0.5) * scale - 0.5;
            let base = centre.floor();
            let frac = centre - base;
            let base = base as isize;
            let raw: Vec<(isize, f32)> = match method {
                Interpolation::Bicubic => (-1..=2)
                    .map(|k| (base + k, cubic_weight(frac - k as f32)))
                    .collect(),
                Interpolation::Bilinear => vec![(base, 1.0 - frac), (base + 1, frac)],
            };
            let total: f32 = raw.iter().map(|&(_, w)| w).sum();
            let mut taps: Vec<(usize, f32)> = Vec::with_capacity(raw.len());
            for (i, w) in raw {
                let i = i.clamp(0, last) as usize;
                let w = w / total;
                match taps.iter_mut().find(|(j, _)| *j == i) {
                    Some(t) => t.1 += w,
                    None => taps.push((i, w)),
                }
            }
            taps
        })
        .collect()
}
