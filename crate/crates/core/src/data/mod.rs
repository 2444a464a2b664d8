//! Labeled tiles, manifests, LR/HR pairing, stratified folds and
//! augmentation.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};
use crate::seed::{derived_rng, rng_from_seed};

pub use synth::{
    default_classes, downsample_dataset, synth_generate, ClassSpec, ShapeKind, SynthConfig, SynthOutput,
};

/// A labeled image with its ground sample distance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    pub pixels: Image,
    pub gsd_meters: f64,
    pub class_id: usize,
    pub sample_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub tiles: Vec<ImageTile>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for t in &self.tiles {
            counts[t.class_id] += 1;
        }
        counts
    }

    /// Tile indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, t) in self.tiles.iter().enumerate() {
            out[t.class_id].push(i);
        }
        out
    }

    pub fn labels(&self) -> Vec<usize> {
        self.tiles.iter().map(|t| t.class_id).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            class_names: self.class_names.clone(),
            tiles: indices.iter().map(|&i| self.tiles[i].clone()).collect(),
        }
    }

    /// Order-sensitive digest of ids, labels and pixels.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for t in &self.tiles {
            h.update(t.sample_id.as_bytes());
            h.update((t.class_id as u64).to_le_bytes());
            let (c, hh, w) = t.pixels.dims();
            for d in [c, hh, w] {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.pixels.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Upscaled-LR conditioning images paired with their HR targets.
#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub pairs: Vec<(ImageTile, ImageTile)>,
    pub scale_factor: usize,
}

impl PairedDataset {
    /// Pairs LR and HR tiles by position; ids and labels must agree.
    pub fn from_lr_hr(
        lr: &LabeledDataset,
        hr: &LabeledDataset,
        factor: usize,
        method: Interpolation,
    ) -> Result<Self> {
        if lr.len() != hr.len() {
            return Err(Error::LengthMismatch {
                left: lr.len(),
                right: hr.len(),
            });
        }
        let mut pairs = Vec::with_capacity(lr.len());
        for (l, h) in lr.tiles.iter().zip(&hr.tiles) {
            if l.sample_id != h.sample_id || l.class_id != h.class_id {
                return Err(Error::MissingData(format!(
                    "LR tile {} has no HR partner",
                    l.sample_id
                )));
            }
            let x = upscale_lr(l, factor, method)?;
            if x.pixels.dims() != h.pixels.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: upscaled LR {:?} vs HR {:?}",
                    l.sample_id,
                    x.pixels.dims(),
                    h.pixels.dims()
                )));
            }
            pairs.push((x, h.clone()));
        }
        Ok(Self {
            pairs,
            scale_factor: factor,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn images(&self) -> Vec<(Image, Image)> {
        self.pairs
            .iter()
            .map(|(x, y)| (x.pixels.clone(), y.pixels.clone()))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    sample_id: String,
    path: String,
    class: String,
}

/// One manifest line as written by [`write_manifest`].
#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: String,
    pub class: String,
    pub lon: Option<f64>,
    pub lat: Option<f64>,
}

const CLASS_LINE: &str = "# classes:";

/// Write `manifest.csv`. The first line declares the class order.
pub fn write_manifest(path: &Path, class_names: &[String], entries: &[ManifestEntry]) -> Result<()> {
    let mut text = format!("{CLASS_LINE} {}\n", class_names.join(","));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "path", "class", "lon", "lat"])?;
    for e in entries {
        let lon = e.lon.map(|v| v.to_string()).unwrap_or_default();
        let lat = e.lat.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([&e.sample_id, &e.path, &e.class, &lon, &lat])?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    text.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    std::fs::write(path, text)?;
    Ok(())
}

/// Load every tile listed in `manifest`, resolving paths against `root`.
///
/// Class ids follow the `# classes:` declaration line when present and
/// first appearance otherwise. Rows naming an undeclared class fail.
pub fn load_dataset(root: &Path, manifest: &Path, gsd_meters: f64) -> Result<LabeledDataset> {
    let is_empty_dir = std::fs::read_dir(root)
        .map(|mut d| d.next().is_none())
        .unwrap_or(true);
    if is_empty_dir {
        return Err(Error::MissingData(format!(
            "dataset root {} is missing or empty",
            root.display()
        )));
    }
    let text = std::fs::read_to_string(manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingData(format!("manifest {} not found", manifest.display()))
        }
        _ => Error::Io(e),
    })?;
    let (declared, body) = match text.strip_prefix(CLASS_LINE) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let names: Vec<String> = line
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            (Some(names), body)
        }
        None => (None, text.as_str()),
    };
    let mut class_names = declared.clone().unwrap_or_default();
    let mut seen = HashSet::new();
    let mut tiles = Vec::new();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row?;
        let class_id = match class_names.iter().position(|c| c == &row.class) {
            Some(id) => id,
            None if declared.is_none() => {
                class_names.push(row.class.clone());
                class_names.len() - 1
            }
            None => {
                return Err(Error::UnknownClass {
                    class: row.class,
                    row: i + 1,
                })
            }
        };
        if !seen.insert(row.sample_id.clone()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate sample id {} in manifest",
                row.sample_id
            )));
        }
        let pixels = Image::read_png(&root.join(&row.path))?;
        tiles.push(ImageTile {
            pixels,
            gsd_meters,
            class_id,
            sample_id: row.sample_id,
        });
    }
    if tiles.is_empty() {
        return Err(Error::MissingData(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    let ds = LabeledDataset { class_names, tiles };
    for (name, n) in ds.class_names.iter().zip(ds.class_counts()) {
        log::info!("class {name}: {n} tiles");
    }
    Ok(ds)
}

/// Sample id to fold index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub k: usize,
    pub fold_of_sample: BTreeMap<String, usize>,
}

impl SplitAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.fold_of_sample.get(sample_id).copied()
    }

    /// Dataset positions of the samples in `fold`.
    pub fn fold_indices(&self, ds: &LabeledDataset, fold: usize) -> Vec<usize> {
        ds.tiles
            .iter()
            .enumerate()
            .filter(|(_, t)| self.fold_of(&t.sample_id) == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    /// `(train, test)` positions with `fold` held out.
    pub fn train_test(&self, ds: &LabeledDataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, t) in ds.tiles.iter().enumerate() {
            if self.fold_of(&t.sample_id) == Some(fold) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Stratified `k`-fold assignment. Within each class the shuffled samples
/// are dealt round-robin, starting where the previous class stopped so
/// that overall fold sizes also stay within one of each other.
pub fn make_splits(ds: &LabeledDataset, k: usize, seed: u64) -> Result<SplitAssignment> {
    if k < 2 {
        return Err(Error::InvalidFoldCount {
            k,
            reason: "need at least 2 folds".into(),
        });
    }
    let by_class = ds.indices_by_class();
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() < k) {
        return Err(Error::InvalidFoldCount {
            k,
            reason: format!("class {} has only {} samples", ds.class_names[c], idx.len()),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut fold_of_sample = BTreeMap::new();
    let mut offset = 0;
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of_sample.insert(ds.tiles[i].sample_id.clone(), (offset + pos) % k);
        }
        offset = (offset + idx.len()) % k;
    }
    Ok(SplitAssignment { k, fold_of_sample })
}

/// Interpolate a tile up by `factor`; the GSD shrinks accordingly.
pub fn upscale_lr(tile: &ImageTile, factor: usize, method: Interpolation) -> Result<ImageTile> {
    Ok(ImageTile {
        pixels: tile.pixels.upscale(factor, method)?,
        gsd_meters: tile.gsd_meters / factor as f64,
        class_id: tile.class_id,
        sample_id: tile.sample_id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    /// Square crop side; `None` keeps the full tile.
    pub crop: Option<usize>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            crop: None,
        }
    }
}

/// Random horizontal flip then random square crop.
pub fn augment_with<R: Rng + ?Sized>(
    tile: &ImageTile,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ImageTile> {
    let (_, h, w) = tile.pixels.dims();
    let (ch, cw) = policy.crop.map_or((h, w), |s| (s, s));
    if ch > h || cw > w {
        return Err(Error::CropTooLarge {
            crop: ch,
            height: h,
            width: w,
        });
    }
    let flip = policy.hflip_prob > 0.0 && rng.random::<f64>() < policy.hflip_prob;
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let mut pixels = if flip {
        tile.pixels.hflip()
    } else {
        tile.pixels.clone()
    };
    if (ch, cw) != (h, w) {
        pixels = pixels.crop(top, left, ch, cw)?;
    }
    Ok(ImageTile {
        pixels,
        gsd_meters: tile.gsd_meters,
        class_id: tile.class_id,
        sample_id: tile.sample_id.clone(),
    })
}

/// [`augment_with`] on a stream derived from `(seed, sample_id)`.
pub fn augment(tile: &ImageTile, policy: &AugmentPolicy, seed: u64) -> Result<ImageTile> {
    augment_with(tile, policy, &mut derived_rng(seed, &tile.sample_id))
}

/// Directory layout helper: `<root>/<class>/<id>.png`.
pub fn tile_path(class: &str, sample_id: &str) -> PathBuf {
    Path::new(class).join(format!("{sample_id}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile(id: &str, class_id: usize, h: usize, w: usize, seed: u64) -> ImageTile {
        let mut rng = rng_from_seed(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ImageTile {
            pixels: Image::from_vec(3, h, w, data).unwrap(),
            gsd_meters: 4.78,
            class_id,
            sample_id: id.into(),
        }
    }

    fn dataset(counts: &[usize]) -> LabeledDataset {
        let mut tiles = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                tiles.push(tile(&format!("c{c}_{i}"), c, 2, 2, (c * 10_000 + i) as u64));
            }
        }
        LabeledDataset {
            class_names: (0..counts.len()).map(|c| format!("class{c}")).collect(),
            tiles,
        }
    }

    #[test]
    fn paper_scale_folds() {
        let ds = dataset(&[1000; 11]);
        let s = make_splits(&ds, 5, 7).unwrap();
        for f in 0..5 {
            let idx = s.fold_indices(&ds, f);
            assert_eq!(idx.len(), 2200);
            let sub = ds.subset(&idx);
            assert!(sub.class_counts().iter().all(|&n| n == 200));
        }
        let (train, test) = s.train_test(&ds, 0);
        assert_eq!((train.len(), test.len()), (8800, 2200));
    }

    #[test]
    fn exact_division_and_bad_k() {
        let ds = dataset(&[10]);
        let s = make_splits(&ds, 5, 0).unwrap();
        for f in 0..5 {
            assert_eq!(s.fold_indices(&ds, f).len(), 2);
        }
        assert!(matches!(make_splits(&ds, 1, 0), Err(Error::InvalidFoldCount { .. })));
        assert!(matches!(make_splits(&ds, 11, 0), Err(Error::InvalidFoldCount { .. })));
    }

    #[test]
    fn splits_are_seeded() {
        let ds = dataset(&[13, 7]);
        assert_eq!(make_splits(&ds, 3, 9).unwrap(), make_splits(&ds, 3, 9).unwrap());
        assert_ne!(make_splits(&ds, 3, 9).unwrap(), make_splits(&ds, 3, 10).unwrap());
    }

    proptest! {
        #[test]
        fn folds_are_stratified_partitions(
            counts in prop::collection::vec(5usize..30, 1..5),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let ds = dataset(&counts);
            let s = make_splits(&ds, k, seed).unwrap();
            let mut seen = Vec::new();
            for f in 0..k {
                seen.extend(s.fold_indices(&ds, f));
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
            for c in 0..counts.len() {
                let per: Vec<usize> = (0..k)
                    .map(|f| s.fold_indices(&ds, f).iter().filter(|&&i| ds.tiles[i].class_id == c).count())
                    .collect();
                let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }

        #[test]
        fn upscale_multiplies_sides(h in 1usize..9, w in 1usize..9, f in 1usize..5, seed in any::<u64>()) {
            let t = tile("a", 0, h, w, seed);
            let up = upscale_lr(&t, f, Interpolation::Bicubic).unwrap();
            prop_assert_eq!(up.pixels.dims(), (3, h * f, w * f));
            prop_assert!(up.pixels.data().iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn identity_policy(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let t = tile("a", 0, h, w, seed);
            let p = AugmentPolicy { hflip_prob: 0.0, crop: None };
            prop_assert_eq!(augment(&t, &p, seed).unwrap(), t.clone());
            if h == w {
                let p = AugmentPolicy { hflip_prob: 0.0, crop: Some(h) };
                prop_assert_eq!(augment(&t, &p, seed).unwrap(), t);
            }
        }
    }

    #[test]
    fn upscale_examples() {
        let t = tile("a", 3, 32, 32, 1);
        let up = upscale_lr(&t, 4, Interpolation::Bicubic).unwrap();
        assert_eq!(up.pixels.dims(), (3, 128, 128));
        assert!((up.gsd_meters - 4.78 / 4.0).abs() < 1e-12);
        assert_eq!(up.class_id, 3);
        assert_eq!(upscale_lr(&t, 1, Interpolation::Bilinear).unwrap(), t);
        assert!(matches!(
            upscale_lr(&t, 0, Interpolation::Bicubic),
            Err(Error::InvalidFactor(0))
        ));
        let flat = ImageTile {
            pixels: Image::filled(3, 5, 7, 0.3),
            ..t
        };
        for m in [Interpolation::Bicubic, Interpolation::Bilinear] {
            let up = upscale_lr(&flat, 3, m).unwrap();
            assert!(up.pixels.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn augment_examples() {
        let t = tile("x", 1, 128, 128, 4);
        let forced = AugmentPolicy {
            hflip_prob: 1.0,
            crop: None,
        };
        let once = augment(&t, &forced, 1).unwrap();
        assert_ne!(once, t);
        assert_eq!(augment(&once, &forced, 2).unwrap(), t);

        let crop = AugmentPolicy {
            hflip_prob: 0.5,
            crop: Some(112),
        };
        let a = augment(&t, &crop, 11).unwrap();
        assert_eq!(a.pixels.dims(), (3, 112, 112));
        assert_eq!(a.class_id, 1);
        assert_eq!(a, augment(&t, &crop, 11).unwrap());

        let big = AugmentPolicy {
            hflip_prob: 0.0,
            crop: Some(129),
        };
        assert!(matches!(augment(&t, &big, 0), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("tiles");
        let names = vec!["CO".to_string(), "Edu".to_string()];
        let mut entries = Vec::new();
        for (i, class) in ["Edu", "CO", "Edu"].iter().enumerate() {
            let id = format!("s{i}");
            let rel = tile_path(class, &id);
            std::fs::create_dir_all(root.join(class)).unwrap();
            let mut t = tile(&id, 0, 4, 4, i as u64);
            t.pixels.quantize_u8();
            t.pixels.write_png(&root.join(&rel)).unwrap();
            entries.push(ManifestEntry {
                sample_id: id,
                path: rel.to_string_lossy().into_owned(),
                class: class.to_string(),
                lon: Some(114.1),
                lat: None,
            });
        }
        let manifest = dir.path().join("manifest.csv");
        write_manifest(&manifest, &names, &entries).unwrap();
        let ds = load_dataset(&root, &manifest, 1.195).unwrap();
        assert_eq!(ds.class_names, names);
        assert_eq!(ds.labels(), vec![1, 0, 1]);
        assert_eq!(ds.class_counts(), vec![1, 2]);

        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replacen("s1,CO/s1.png,CO", "s1,CO/s1.png,Castle", 1)).unwrap();
        assert!(matches!(
            load_dataset(&root, &manifest, 1.0),
            Err(Error::UnknownClass { row: 2, .. })
        ));

        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(matches!(load_dataset(&empty, &manifest, 1.0), Err(Error::MissingData(_))));

        std::fs::write(&manifest, text.replacen("CO/s1.png", "CO/gone.png", 1)).unwrap();
        assert!(matches!(load_dataset(&root, &manifest, 1.0), Err(Error::MissingData(_))));
    }

    #[test]
    fn undeclared_classes_follow_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = tile("a", 0, 2, 2, 0);
        t.pixels.quantize_u8();
        t.pixels.write_png(&dir.path().join("a.png")).unwrap();
        t.pixels.write_png(&dir.path().join("b.png")).unwrap();
        let manifest = dir.path().join("m.csv");
        std::fs::write(&manifest, "sample_id,path,class,lon,lat\na,a.png,Reli,,\nb,b.png,Mix,1.0,2.0\n").unwrap();
        let ds = load_dataset(dir.path(), &manifest, 1.0).unwrap();
        assert_eq!(ds.class_names, vec!["Reli", "Mix"]);
        assert_eq!(ds.tiles[0].pixels, t.pixels);
    }
}
