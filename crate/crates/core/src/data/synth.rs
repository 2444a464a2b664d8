//! Procedural building tiles.
//!
//! Each class pairs a footprint family with a roof colour. Footprints are
//! rasterised on the HR pixel grid with hard edges, centred with random
//! jitter, over a lightly textured ground plane with an optional road and a
//! cast shadow. LR tiles are the area-averaged HR tiles.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tile_path, write_manifest, ImageTile, LabeledDataset, ManifestEntry, PairedDataset};
use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};
use crate::seed::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    LShape,
    Courtyard,
    Twin,
    Cross,
    Round,
    /// Rectangle with a two-tone pitched roof.
    Gable,
    /// A handful of small detached houses.
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Mean roof colour in `[-1, 1]`.
    pub roof: [f32; 3],
    /// Half-width of the uniform per-tile roof colour jitter.
    #[serde(default = "default_roof_jitter")]
    pub roof_jitter: f32,
    /// Per-pixel roof texture amplitude.
    #[serde(default = "default_texture")]
    pub texture: f32,
}

fn default_roof_jitter() -> f32 {
    0.12
}

fn default_texture() -> f32 {
    0.02
}

impl ClassSpec {
    pub fn new(name: &str, shape: ShapeKind, roof: [f32; 3]) -> Self {
        Self {
            name: name.into(),
            shape,
            roof,
            roof_jitter: default_roof_jitter(),
            texture: default_texture(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub counts: Vec<usize>,
    pub hr_size: usize,
    pub scale_factor: usize,
    pub hr_gsd_meters: f64,
    pub road_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            classes: default_classes(),
            counts: vec![300, 300, 300, 300, 300, 30],
            hr_size: 32,
            scale_factor: 4,
            hr_gsd_meters: 1.195,
            road_prob: 0.4,
            seed: 0,
        }
    }
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec::new("CO", ShapeKind::Rect, [0.30, 0.30, 0.38]),
        ClassSpec::new("Edu", ShapeKind::LShape, [0.45, 0.20, 0.10]),
        ClassSpec::new("HP", ShapeKind::Courtyard, [0.25, 0.30, 0.45]),
        ClassSpec::new("Indus", ShapeKind::Twin, [0.15, 0.35, 0.60]),
        ClassSpec::new("PH", ShapeKind::Cross, [0.55, 0.55, 0.50]),
        ClassSpec::new("Reli", ShapeKind::Round, [0.60, 0.40, 0.15]),
    ]
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
        }
        if self.counts.len() != self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} counts for {} classes",
                self.counts.len(),
                self.classes.len()
            )));
        }
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidConfig(format!(
                "class {} has count 0",
                self.classes[i].name
            )));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("class names must be distinct".into()));
        }
        if self.scale_factor == 0 || !self.hr_size.is_multiple_of(self.scale_factor) {
            return Err(Error::InvalidConfig(format!(
                "hr_size {} is not a multiple of scale_factor {}",
                self.hr_size, self.scale_factor
            )));
        }
        if self.hr_size < 8 {
            return Err(Error::InvalidConfig("hr_size must be at least 8".into()));
        }
        if !(self.hr_gsd_meters > 0.0) {
            return Err(Error::InvalidConfig("hr_gsd_meters must be positive".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// HR tiles on the 8-bit grid and their exact area-averaged LR tiles.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub hr: LabeledDataset,
    pub lr: LabeledDataset,
}

impl SynthOutput {
    /// Bicubic or bilinear upscaled LR against HR.
    pub fn paired(&self, method: Interpolation) -> Result<PairedDataset> {
        PairedDataset::from_lr_hr(&self.lr, &self.hr, self.config.scale_factor, method)
    }

    /// Write `<out>/<name>/{hr,lr}/<class>/<id>.png` and
    /// `<out>/<name>/manifest.csv`. Returns the archive directory.
    ///
    /// LR PNGs are 8-bit renderings; the exact LR is recomputed from the HR
    /// PNGs by [`SynthOutput::load_archive`].
    pub fn write_archive(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join(&self.config.name);
        let mut entries = Vec::with_capacity(self.hr.len());
        for (h, l) in self.hr.tiles.iter().zip(&self.lr.tiles) {
            let class = &self.hr.class_names[h.class_id];
            let rel = tile_path(class, &h.sample_id);
            for (sub, tile) in [("hr", h), ("lr", l)] {
                let path = dir.join(sub).join(&rel);
                std::fs::create_dir_all(path.parent().expect("tile path has a parent"))?;
                tile.pixels.write_png(&path)?;
            }
            entries.push(ManifestEntry {
                sample_id: h.sample_id.clone(),
                path: rel.to_string_lossy().replace('\\', "/"),
                class: class.clone(),
                lon: None,
                lat: None,
            });
        }
        write_manifest(&dir.join("manifest.csv"), &self.hr.class_names, &entries)?;
        Ok(dir)
    }

    /// Read an archive written by [`SynthOutput::write_archive`].
    pub fn load_archive(dir: &Path, config: &SynthConfig) -> Result<SynthOutput> {
        let hr = super::load_dataset(&dir.join("hr"), &dir.join("manifest.csv"), config.hr_gsd_meters)?;
        let lr = downsample_dataset(&hr, config.scale_factor)?;
        Ok(SynthOutput {
            config: config.clone(),
            hr,
            lr,
        })
    }
}

pub fn downsample_dataset(hr: &LabeledDataset, factor: usize) -> Result<LabeledDataset> {
    let tiles = hr
        .tiles
        .iter()
        .map(|t| {
            Ok(ImageTile {
                pixels: t.pixels.area_downsample(factor)?,
                gsd_meters: t.gsd_meters * factor as f64,
                class_id: t.class_id,
                sample_id: t.sample_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        class_names: hr.class_names.clone(),
        tiles,
    })
}

/// Generate the configured tiles. Each tile draws from its own stream keyed
/// by `(seed, sample_id)`, so output is independent of generation order.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut tiles = Vec::with_capacity(config.counts.iter().sum());
    for (class_id, (spec, &n)) in config.classes.iter().zip(&config.counts).enumerate() {
        for i in 0..n {
            let sample_id = format!("{}_{i:05}", spec.name);
            let mut rng = derived_rng(config.seed, &sample_id);
            let mut pixels = render(spec, config, &mut rng);
            pixels.clamp_unit();
            pixels.quantize_u8();
            tiles.push(ImageTile {
                pixels,
                gsd_meters: config.hr_gsd_meters,
                class_id,
                sample_id,
            });
        }
    }
    let hr = LabeledDataset {
        class_names: config.class_names(),
        tiles,
    };
    let lr = downsample_dataset(&hr, config.scale_factor)?;
    Ok(SynthOutput {
        config: config.clone(),
        hr,
        lr,
    })
}

/// Pixel labels: 0 ground, 1 roof, 2 secondary roof.
type Mask = Vec<u8>;

#[derive(Clone, Copy)]
struct BoxI {
    y: i32,
    x: i32,
    h: i32,
    w: i32,
}

impl BoxI {
    fn fill(&self, mask: &mut Mask, size: i32, label: u8) {
        for yy in self.y.max(0)..(self.y + self.h).min(size) {
            for xx in self.x.max(0)..(self.x + self.w).min(size) {
                mask[(yy * size + xx) as usize] = label;
            }
        }
    }
}

fn footprint<R: Rng>(shape: ShapeKind, size: i32, rng: &mut R) -> Mask {
    let mut mask = vec![0u8; (size * size) as usize];
    let lo = (size as f32 * 0.45).round() as i32;
    let hi = (size as f32 * 0.75).round() as i32;
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    let jitter = (size / 8).max(1);
    let cy = size / 2 + rng.random_range(-jitter..=jitter);
    let cx = size / 2 + rng.random_range(-jitter..=jitter);
    let b = BoxI {
        y: cy - h / 2,
        x: cx - w / 2,
        h,
        w,
    };
    match shape {
        ShapeKind::Rect => b.fill(&mut mask, size, 1),
        ShapeKind::LShape => {
            b.fill(&mut mask, size, 1);
            let ch = (h as f32 * rng.random_range(0.4..0.6)).round() as i32;
            let cw = (w as f32 * rng.random_range(0.4..0.6)).round() as i32;
            let (top, left) = (rng.random::<bool>(), rng.random::<bool>());
            let cut = BoxI {
                y: if top { b.y } else { b.y + h - ch },
                x: if left { b.x } else { b.x + w - cw },
                h: ch,
                w: cw,
            };
            cut.fill(&mut mask, size, 0);
        }
        ShapeKind::Courtyard => {
            b.fill(&mut mask, size, 1);
            let m = (h.min(w) as f32 * rng.random_range(0.25..0.32)).round().max(2.0) as i32;
            BoxI {
                y: b.y + m,
                x: b.x + m,
                h: h - 2 * m,
                w: w - 2 * m,
            }
            .fill(&mut mask, size, 0);
        }
        ShapeKind::Twin => {
            let gap = rng.random_range(2..=3);
            if h >= w {
                let top = (h - gap) / 2;
                BoxI { h: top, ..b }.fill(&mut mask, size, 1);
                BoxI {
                    y: b.y + top + gap,
                    h: h - top - gap,
                    ..b
                }
                .fill(&mut mask, size, 1);
            } else {
                let left = (w - gap) / 2;
                BoxI { w: left, ..b }.fill(&mut mask, size, 1);
                BoxI {
                    x: b.x + left + gap,
                    w: w - left - gap,
                    ..b
                }
                .fill(&mut mask, size, 1);
            }
        }
        ShapeKind::Cross => {
            let th = (h as f32 * rng.random_range(0.35..0.45)).round() as i32;
            let tw = (w as f32 * rng.random_range(0.35..0.45)).round() as i32;
            BoxI {
                y: b.y + (h - th) / 2,
                h: th,
                ..b
            }
            .fill(&mut mask, size, 1);
            BoxI {
                x: b.x + (w - tw) / 2,
                w: tw,
                ..b
            }
            .fill(&mut mask, size, 1);
        }
        ShapeKind::Round => {
            let (ry, rx) = (h as f32 / 2.0, w as f32 / 2.0);
            let (oy, ox) = (b.y as f32 + ry, b.x as f32 + rx);
            for yy in 0..size {
                for xx in 0..size {
                    let dy = (yy as f32 + 0.5 - oy) / ry;
                    let dx = (xx as f32 + 0.5 - ox) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        mask[(yy * size + xx) as usize] = 1;
                    }
                }
            }
        }
        ShapeKind::Gable => {
            b.fill(&mut mask, size, 1);
            if h >= w {
                BoxI { w: w / 2, ..b }.fill(&mut mask, size, 2);
            } else {
                BoxI { h: h / 2, ..b }.fill(&mut mask, size, 2);
            }
        }
        ShapeKind::Cluster => {
            let n = rng.random_range(3..=5);
            let s = (size / 6).max(2);
            for _ in 0..n {
                let hs = rng.random_range(s..=s + 2);
                let ws = rng.random_range(s..=s + 2);
                BoxI {
                    y: b.y + rng.random_range(0..=(h - hs).max(0)),
                    x: b.x + rng.random_range(0..=(w - ws).max(0)),
                    h: hs,
                    w: ws,
                }
                .fill(&mut mask, size, 1);
            }
        }
    }
    mask
}

fn render(spec: &ClassSpec, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let size = config.hr_size as i32;
    let n = (size * size) as usize;
    let ground_base = [-0.30f32, -0.15, -0.40];
    let ground: Vec<f32> = ground_base
        .iter()
        .map(|g| g + rng.random_range(-0.12..0.12))
        .collect();
    let roof: Vec<f32> = spec
        .roof
        .iter()
        .map(|r| r + rng.random_range(-spec.roof_jitter..=spec.roof_jitter))
        .collect();

    let mut road = vec![false; n];
    if rng.random::<f64>() < config.road_prob {
        let width = rng.random_range(3..=5);
        let at = if rng.random::<bool>() {
            rng.random_range(0..3)
        } else {
            size - width - rng.random_range(0..3)
        };
        let horizontal = rng.random::<bool>();
        for yy in 0..size {
            for xx in 0..size {
                let v = if horizontal { yy } else { xx };
                if v >= at && v < at + width {
                    road[(yy * size + xx) as usize] = true;
                }
            }
        }
    }
    let road_tone = rng.random_range(-0.05f32..0.10);

    let mask = footprint(spec.shape, size, rng);
    let shift = rng.random_range(1..=2);
    let mut img = Image::zeros(3, size as usize, size as usize);
    for yy in 0..size {
        for xx in 0..size {
            let i = (yy * size + xx) as usize;
            let label = mask[i];
            let shadow = label == 0
                && yy >= shift
                && xx >= shift
                && mask[((yy - shift) * size + xx - shift) as usize] != 0;
            for c in 0..3 {
                let v = match label {
                    1 => roof[c] + rng.random_range(-spec.texture..=spec.texture),
                    2 => 0.7 * (roof[c] + 1.0) - 1.0 + rng.random_range(-spec.texture..=spec.texture),
                    _ => {
                        let base = if road[i] { road_tone } else { ground[c] };
                        let base = base + rng.random_range(-0.02..=0.02);
                        if shadow {
                            0.55 * (base + 1.0) - 1.0
                        } else {
                            base
                        }
                    }
                };
                img.set(c, yy as usize, xx as usize, v);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(counts: Vec<usize>) -> SynthConfig {
        let mut classes = default_classes();
        classes.truncate(counts.len());
        SynthConfig {
            classes,
            counts,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn exact_counts() {
        let out = synth_generate(&small(vec![500, 500, 500, 500, 500, 50])).unwrap();
        assert_eq!(out.hr.len(), 2550);
        assert_eq!(out.hr.class_counts(), vec![500, 500, 500, 500, 500, 50]);
        assert_eq!(out.lr.class_counts(), out.hr.class_counts());
    }

    #[test]
    fn lr_is_area_downsample_of_hr() {
        let out = synth_generate(&small(vec![5, 5, 5])).unwrap();
        for (h, l) in out.hr.tiles.iter().zip(&out.lr.tiles) {
            assert_eq!(h.pixels.area_downsample(4).unwrap(), l.pixels);
            assert_eq!(l.pixels.dims(), (3, 8, 8));
            assert!((l.gsd_meters - 4.78).abs() < 1e-12);
        }
        let paired = out.paired(Interpolation::Bicubic).unwrap();
        assert_eq!(paired.scale_factor, 4);
        assert!(paired.pairs.iter().all(|(x, y)| x.pixels.dims() == y.pixels.dims()));
    }

    #[test]
    fn every_shape_renders_a_building() {
        let shapes = [
            ShapeKind::Rect,
            ShapeKind::LShape,
            ShapeKind::Courtyard,
            ShapeKind::Twin,
            ShapeKind::Cross,
            ShapeKind::Round,
            ShapeKind::Gable,
            ShapeKind::Cluster,
        ];
        let mut rng = derived_rng(1, "shapes");
        for s in shapes {
            for _ in 0..20 {
                let m = footprint(s, 32, &mut rng);
                let area = m.iter().filter(|&&v| v != 0).count();
                assert!(area >= 20, "{s:?} area {area}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(synth_generate(&small(vec![5, 0])), Err(Error::InvalidConfig(_))));
        assert!(matches!(synth_generate(&small(vec![5])), Err(Error::InvalidConfig(_))));
        let mut c = small(vec![2, 2]);
        c.hr_size = 30;
        assert!(matches!(synth_generate(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn archive_is_byte_identical_and_reloads() {
        let cfg = small(vec![6, 4]);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = synth_generate(&cfg).unwrap().write_archive(a.path()).unwrap();
        let db = synth_generate(&cfg).unwrap().write_archive(b.path()).unwrap();
        let files = |d: &Path| {
            let mut v = Vec::new();
            for sub in ["hr/CO", "hr/Edu", "lr/CO", "lr/Edu"] {
                for e in std::fs::read_dir(d.join(sub)).unwrap() {
                    let p = e.unwrap().path();
                    v.push((p.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
            v.push(("manifest.csv".into(), std::fs::read(d.join("manifest.csv")).unwrap()));
            v.sort();
            v
        };
        assert_eq!(files(&da), files(&db));
        let back = SynthOutput::load_archive(&da, &cfg).unwrap();
        let orig = synth_generate(&cfg).unwrap();
        assert_eq!(back.hr, orig.hr);
        assert_eq!(back.lr, orig.lr);
    }
}
