//! Minimal raster charts written as PNG. Numbers live in the accompanying
//! CSV files; the charts carry bars, axes and gridlines only.

use std::path::Path;

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        for y in y0.min(self.height)..y1.min(self.height) {
            for x in x0.min(self.width)..x1.min(self.width) {
                let i = (y * self.width + x) * 3;
                self.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.rgb).map_err(err)?;
        w.finish().map_err(err)?;
        Ok(())
    }
}

const MARGIN: usize = 12;

fn frame(c: &mut Canvas, gridlines: usize) {
    let (w, h) = (c.width, c.height);
    for g in 1..=gridlines {
        let y = h - MARGIN - (h - 2 * MARGIN) * g / gridlines;
        c.fill_rect(MARGIN, y, w - MARGIN, y + 1, [225, 225, 225]);
    }
    c.fill_rect(MARGIN, MARGIN, MARGIN + 1, h - MARGIN, [0, 0, 0]);
    c.fill_rect(MARGIN, h - MARGIN, w - MARGIN, h - MARGIN + 1, [0, 0, 0]);
}

/// Grouped bars: `series[s][i]` is the value of series `s` in group `i`.
/// Heights are scaled to `y_max`.
pub fn grouped_bars(path: &Path, series: &[Vec<f64>], y_max: f64) -> Result<()> {
    let groups = series.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = ((groups * (series.len() * 8 + 6)).max(120) + 2 * MARGIN, 200);
    let mut c = Canvas::new(w, h);
    frame(&mut c, 4);
    let plot_h = (h - 2 * MARGIN) as f64;
    let group_w = (w - 2 * MARGIN - 2) / groups.max(1);
    let bar_w = ((group_w.saturating_sub(4)) / series.len().max(1)).max(1);
    for (s, values) in series.iter().enumerate() {
        for (i, &v) in values.iter().enumerate() {
            let frac = if y_max > 0.0 { (v / y_max).clamp(0.0, 1.0) } else { 0.0 };
            let x0 = MARGIN + 3 + i * group_w + s * bar_w;
            let top = h - MARGIN - (frac * plot_h).round() as usize;
            c.fill_rect(x0, top, x0 + bar_w, h - MARGIN, PALETTE[s % PALETTE.len()]);
        }
    }
    c.save(path)
}

/// Histogram bars from counts.
pub fn histogram(path: &Path, counts: &[u64]) -> Result<()> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    grouped_bars(path, &[values], max)
}
