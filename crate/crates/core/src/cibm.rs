//! Category information balancing.
//!
//! A frozen teacher maps every training tile of a class to a feature
//! vector. The summed pairwise Euclidean distances within a class (its
//! spread) scale that class's inverse frequency to give a sampling weight.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};
use crate::nn::{Activation, AvgPool2, Conv2d, GlobalAvgPool, Layer, Linear, Sequential, Tensor};
use crate::seed::rng_from_seed;

/// Spreads below this are raised to it so no class is starved.
pub const SPREAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Native square input side; other sizes are resized bicubically.
    pub input_size: usize,
    pub embed_dim: usize,
    /// Size of the teacher's own label space.
    pub classes: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            embed_dim: 64,
            classes: 32,
            seed: 1234,
        }
    }
}

/// Frozen random-weight convolutional encoder with a linear label head.
pub struct Teacher {
    config: TeacherConfig,
    encoder: Sequential,
    head: Linear,
}

impl Teacher {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        if config.input_size < 4 || !config.input_size.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "teacher input size {} must be a positive multiple of 4",
                config.input_size
            )));
        }
        if config.embed_dim == 0 || config.classes == 0 {
            return Err(Error::InvalidConfig("teacher widths must be positive".into()));
        }
        let mut rng = rng_from_seed(config.seed);
        let d = config.embed_dim;
        let encoder = Sequential::new()
            .push(Conv2d::same(3, 16, 3, &mut rng))
            .push(Activation::relu())
            .push(AvgPool2::default())
            .push(Conv2d::same(16, 32, 3, &mut rng))
            .push(Activation::relu())
            .push(AvgPool2::default())
            .push(Conv2d::same(32, d, 3, &mut rng))
            .push(Activation::relu())
            .push(GlobalAvgPool::default());
        let head = Linear::new(d, config.classes, &mut rng);
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    /// Stable identifier used to key cached targets.
    pub fn id(&self) -> String {
        let c = &self.config;
        format!("random-cnn-s{}-i{}-d{}-c{}", c.seed, c.input_size, c.embed_dim, c.classes)
    }

    fn prepare(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut resized = Vec::with_capacity(images.len());
        for img in images {
            if img.channels() != 3 {
                return Err(Error::TeacherInputMismatch {
                    expected: "3-channel images".into(),
                    found: format!("{} channels", img.channels()),
                });
            }
            resized.push(img.resize(s, s, Interpolation::Bicubic));
        }
        Ok(Tensor::from_images(&resized))
    }

    /// `[N, d]` embeddings.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.embed_dim]));
        }
        let x = self.prepare(images)?;
        Ok(self.encoder.forward(&x))
    }

    /// `[N, C_t]` logits over the teacher's label space.
    pub fn logits(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.classes]));
        }
        Ok(self.head.forward(&self.embed(images)?))
    }
}

/// One feature row per sample of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub class_id: usize,
    pub rows: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(class_id: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: dim,
            });
        }
        Ok(Self {
            class_id,
            rows: rows.len(),
            dim,
            features: rows.concat(),
        })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }
}

/// Teacher embeddings of `images`, in batches of 64.
pub fn extract_features(images: &[&Image], teacher: &Teacher, class_id: usize) -> Result<FeatureMatrix> {
    let dim = teacher.config.embed_dim;
    let mut features = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(64) {
        let e = teacher.embed(chunk)?;
        features.extend(e.data().iter().map(|&v| v as f64));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("teacher produced non-finite features".into()));
    }
    Ok(FeatureMatrix {
        class_id,
        rows: images.len(),
        dim,
        features,
    })
}

/// Symmetric pairwise Euclidean distances within one class.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub class_id: usize,
    pub n: usize,
    pub dis: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.dis[j * self.n + k]
    }

    /// Distances with `j < k`.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for j in 0..self.n {
            for k in j + 1..self.n {
                out.push(self.get(j, k));
            }
        }
        out
    }
}

pub fn distance_matrix(fm: &FeatureMatrix) -> DistanceMatrix {
    let n = fm.rows;
    let mut dis = vec![0.0; n * n];
    for j in 0..n {
        for k in j + 1..n {
            let d = fm
                .row(j)
                .iter()
                .zip(fm.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dis[j * n + k] = d;
            dis[k * n + j] = d;
        }
    }
    DistanceMatrix {
        class_id: fm.class_id,
        n,
        dis,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadNorm {
    /// Sum over ordered pairs `j != k`.
    #[default]
    Sum,
    /// The ordered-pair sum divided by `n (n - 1)`.
    Mean,
}

pub fn compute_spreads(dms: &[DistanceMatrix], norm: SpreadNorm) -> Vec<f64> {
    dms.iter()
        .map(|dm| {
            let mut s = 0.0;
            for j in 0..dm.n {
                for k in 0..dm.n {
                    if j != k {
                        s += dm.get(j, k);
                    }
                }
            }
            match norm {
                SpreadNorm::Sum => s,
                SpreadNorm::Mean if dm.n > 1 => s / (dm.n * (dm.n - 1)) as f64,
                SpreadNorm::Mean => 0.0,
            }
        })
        .collect()
}

/// Class frequencies `p_i = x_i / sum x`.
pub fn class_frequencies(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(i));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Normalised inverse frequencies.
pub fn frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let p = class_frequencies(counts)?;
    let inv: Vec<f64> = p.iter().map(|p| 1.0 / p).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / z).collect())
}

/// Per-class counts, frequencies, spreads and sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeightTable {
    pub counts: Vec<usize>,
    pub p: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    /// Every spread was zero, so the weights are the frequency weights.
    pub all_zero_fallback: bool,
}

/// `W_i = S_i / p_i` normalised, with spreads floored at [`SPREAD_FLOOR`].
pub fn cibm_weights(counts: &[usize], spreads: &[f64]) -> Result<CategoryWeightTable> {
    if counts.len() != spreads.len() {
        return Err(Error::LengthMismatch {
            left: counts.len(),
            right: spreads.len(),
        });
    }
    if let Some(s) = spreads.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::DegenerateWeights(format!("spread {s} is not a finite nonnegative value")));
    }
    let p = class_frequencies(counts)?;
    let all_zero = spreads.iter().all(|&s| s == 0.0);
    if all_zero {
        log::warn!("every class spread is zero; falling back to frequency weights");
    }
    let raw: Vec<f64> = spreads
        .iter()
        .zip(&p)
        .map(|(&s, &p)| s.max(SPREAD_FLOOR) / p)
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(CategoryWeightTable {
        counts: counts.to_vec(),
        p,
        s: spreads.to_vec(),
        w: raw.iter().map(|v| v / z).collect(),
        all_zero_fallback: all_zero,
    })
}

/// A table whose weights are the frequency weights; `S` is reported as 0.
pub fn frequency_table(counts: &[usize]) -> Result<CategoryWeightTable> {
    Ok(CategoryWeightTable {
        counts: counts.to_vec(),
        p: class_frequencies(counts)?,
        s: vec![0.0; counts.len()],
        w: frequency_weights(counts)?,
        all_zero_fallback: false,
    })
}

/// Decimal rendering with `digits` significant digits.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

impl CategoryWeightTable {
    pub fn num_classes(&self) -> usize {
        self.w.len()
    }

    /// CSV with header `class_id,count,p,S,W`, 12 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class_id", "count", "p", "S", "W"])?;
        for i in 0..self.num_classes() {
            w.write_record([
                i.to_string(),
                self.counts[i].to_string(),
                format_significant(self.p[i], 12),
                format_significant(self.s[i], 12),
                format_significant(self.w[i], 12),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            count: usize,
            p: f64,
            #[serde(rename = "S")]
            s: f64,
            #[serde(rename = "W")]
            w: f64,
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingData(format!("weight table {} not found", path.display()))
            }
            _ => Error::Csv(e),
        })?;
        let mut t = CategoryWeightTable {
            counts: Vec::new(),
            p: Vec::new(),
            s: Vec::new(),
            w: Vec::new(),
            all_zero_fallback: false,
        };
        for row in r.deserialize::<Row>() {
            let row = row?;
            t.counts.push(row.count);
            t.p.push(row.p);
            t.s.push(row.s);
            t.w.push(row.w);
        }
        t.all_zero_fallback = t.s.iter().all(|&s| s == 0.0);
        Ok(t)
    }
}

/// Features, distances and weights for a labelled training split.
pub fn weights_for_split(
    images: &[&Image],
    labels: &[usize],
    num_classes: usize,
    teacher: &Teacher,
    norm: SpreadNorm,
) -> Result<(CategoryWeightTable, Vec<DistanceMatrix>)> {
    let mut dms = Vec::with_capacity(num_classes);
    let mut counts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let members: Vec<&Image> = images
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(img, _)| *img)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        counts.push(members.len());
        dms.push(distance_matrix(&extract_features(&members, teacher, c)?));
    }
    let spreads = compute_spreads(&dms, norm);
    Ok((cibm_weights(&counts, &spreads)?, dms))
}

/// Draws a class with probability `W_c`, then a uniform member of it.
pub struct WeightedSampler<R> {
    cumulative: Vec<f64>,
    /// Last positively weighted class, for `u` lost to rounding at the top.
    fallback: usize,
    per_class: Vec<Vec<usize>>,
    rng: R,
}

impl<R: Rng> WeightedSampler<R> {
    pub fn new(weights: &[f64], per_class: Vec<Vec<usize>>, rng: R) -> Result<Self> {
        if weights.len() != per_class.len() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: per_class.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::DegenerateWeights(format!("weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights("weights sum to zero".into()));
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateWeights(format!("weights sum to {total}, not 1")));
        }
        if let Some(c) = (0..weights.len()).find(|&c| weights[c] > 0.0 && per_class[c].is_empty()) {
            return Err(Error::DegenerateWeights(format!("class {c} has weight but no samples")));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let fallback = (0..weights.len()).rev().find(|&c| weights[c] > 0.0).expect("positive total");
        Ok(Self {
            cumulative,
            fallback,
            per_class,
            rng,
        })
    }

    pub fn draw_class(&mut self) -> usize {
        let u: f64 = self.rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.fallback)
    }
}

impl<R: Rng> Iterator for WeightedSampler<R> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let c = self.draw_class();
        let members = &self.per_class[c];
        Some(members[self.rng.random_range(0..members.len())])
    }
}

/// Histogram and summary of one class's upper-triangle distances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSpread {
    pub class_id: usize,
    pub pairs: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Per-class histograms over a shared range `[0, max distance]`.
pub fn intra_class_spread_report(dms: &[DistanceMatrix], bins: usize) -> Vec<ClassSpread> {
    let bins = bins.max(1);
    let all: Vec<Vec<f64>> = dms.iter().map(DistanceMatrix::upper_triangle).collect();
    let hi = all.iter().flatten().copied().fold(0.0f64, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| hi * b as f64 / bins as f64).collect();
    dms.iter()
        .zip(all)
        .map(|(dm, mut d)| {
            let mut counts = vec![0u64; bins];
            for &v in &d {
                let b = ((v / hi) * bins as f64).floor() as usize;
                counts[b.min(bins - 1)] += 1;
            }
            let n = d.len();
            let mean = if n == 0 { 0.0 } else { d.iter().sum::<f64>() / n as f64 };
            let std = if n == 0 {
                0.0
            } else {
                (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            };
            d.sort_by(f64::total_cmp);
            let median = match n {
                0 => 0.0,
                _ if n % 2 == 1 => d[n / 2],
                _ => 0.5 * (d[n / 2 - 1] + d[n / 2]),
            };
            ClassSpread {
                class_id: dm.class_id,
                pairs: n,
                edges: edges.clone(),
                counts,
                mean,
                median,
                std,
            }
        })
        .collect()
}

/// `spread_<class>.csv` and `spread_<class>.png` per class, plus
/// `spread_summary.csv`.
pub fn write_spread_report(dir: &Path, report: &[ClassSpread], class_names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = csv::Writer::from_path(dir.join("spread_summary.csv"))?;
    summary.write_record(["class", "pairs", "mean", "median", "std"])?;
    for cs in report {
        let name = &class_names[cs.class_id];
        let mut w = csv::Writer::from_path(dir.join(format!("spread_{name}.csv")))?;
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (b, &c) in cs.counts.iter().enumerate() {
            w.write_record([cs.edges[b].to_string(), cs.edges[b + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        crate::plot::histogram(&dir.join(format!("spread_{name}.png")), &cs.counts)?;
        summary.write_record([
            name.clone(),
            cs.pairs.to_string(),
            cs.mean.to_string(),
            cs.median.to_string(),
            cs.std.to_string(),
        ])?;
    }
    summary.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(0, rows).unwrap()
    }

    #[test]
    fn distance_examples() {
        let d = distance_matrix(&fm(&[vec![0.0, 0.0], vec![3.0, 4.0]]));
        assert_eq!((d.get(0, 1), d.get(1, 0), d.get(0, 0)), (5.0, 5.0, 0.0));
        assert_eq!(compute_spreads(&[d], SpreadNorm::Sum), vec![10.0]);
        let same = distance_matrix(&fm(&vec![vec![1.0, 2.0]; 4]));
        assert!(same.dis.iter().all(|&v| v == 0.0));
        assert_eq!(compute_spreads(&[same], SpreadNorm::Sum), vec![0.0]);
    }

    #[test]
    fn mean_spread_normalises_by_ordered_pairs() {
        let d = distance_matrix(&fm(&[vec![0.0], vec![1.0], vec![3.0]]));
        let sum = compute_spreads(std::slice::from_ref(&d), SpreadNorm::Sum)[0];
        assert_eq!(sum, 2.0 * (1.0 + 3.0 + 2.0));
        assert_eq!(compute_spreads(&[d], SpreadNorm::Mean)[0], sum / 6.0);
    }

    #[test]
    fn frequency_examples() {
        assert_eq!(frequency_weights(&[100, 100]).unwrap(), vec![0.5, 0.5]);
        let w = frequency_weights(&[100, 300]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(frequency_weights(&[7]).unwrap(), vec![1.0]);
        assert!(matches!(frequency_weights(&[3, 0]), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn cibm_examples() {
        let t = cibm_weights(&[100, 100], &[2.0, 1.0]).unwrap();
        assert!((t.w[0] - 2.0 / 3.0).abs() < 1e-15 && (t.w[1] - 1.0 / 3.0).abs() < 1e-15);
        let u = cibm_weights(&[50, 50, 50], &[4.0, 4.0, 4.0]).unwrap();
        assert!(u.w.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let z = cibm_weights(&[10, 30], &[0.0, 0.0]).unwrap();
        assert!(z.all_zero_fallback);
        let f = frequency_weights(&[10, 30]).unwrap();
        assert!(z.w.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-12));
        let starved = cibm_weights(&[10, 10], &[0.0, 5.0]).unwrap();
        assert!(starved.w[0] > 0.0 && !starved.all_zero_fallback);
        assert!(matches!(cibm_weights(&[1, 2], &[-1.0, 1.0]), Err(Error::DegenerateWeights(_))));
    }

    proptest! {
        #[test]
        fn weight_properties(
            counts in prop::collection::vec(1usize..500, 2..8),
            spreads in prop::collection::vec(0.01f64..100.0, 8),
            scale in 0.001f64..1000.0,
        ) {
            let s = &spreads[..counts.len()];
            let t = cibm_weights(&counts, s).unwrap();
            prop_assert!((t.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((t.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(t.w.iter().all(|&w| w >= 0.0));
            let scaled: Vec<f64> = s.iter().map(|v| v * scale).collect();
            let t2 = cibm_weights(&counts, &scaled).unwrap();
            for (a, b) in t.w.iter().zip(&t2.w) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // Equal spreads reduce to frequency weights.
            let eq = cibm_weights(&counts, &vec![3.0; counts.len()]).unwrap();
            for (a, b) in eq.w.iter().zip(frequency_weights(&counts).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_monotone(counts in prop::collection::vec(1usize..500, 2..6), bump in 1usize..50) {
            let s = vec![1.0; counts.len()];
            let base = cibm_weights(&counts, &s).unwrap();
            let mut more = counts.clone();
            more[0] += bump;
            prop_assert!(cibm_weights(&more, &s).unwrap().w[0] < base.w[0]);
            let mut wider = s.clone();
            wider[0] = 1.5;
            prop_assert!(cibm_weights(&counts, &wider).unwrap().w[0] > base.w[0]);
        }

        #[test]
        fn distances_are_a_metric(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12)) {
            let d = distance_matrix(&fm(&rows));
            let n = d.n;
            for i in 0..n {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    for k in 0..n {
                        prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_examples() {
        let per_class = vec![vec![0, 1, 2], vec![3, 4]];
        let s = WeightedSampler::new(&[1.0, 0.0], per_class.clone(), rng_from_seed(1)).unwrap();
        assert!(s.take(1000).all(|i| i < 3));

        let mut s = WeightedSampler::new(&[0.75, 0.25], per_class.clone(), rng_from_seed(2)).unwrap();
        let n = 100_000;
        let zeros = (0..n).filter(|_| s.draw_class() == 0).count();
        assert!((zeros as f64 / n as f64 - 0.75).abs() < 0.01);

        let a: Vec<usize> = WeightedSampler::new(&[0.5, 0.5], per_class.clone(), rng_from_seed(3))
            .unwrap()
            .take(200)
            .collect();
        let b: Vec<usize> = WeightedSampler::new(&[0.5, 0.5], per_class.clone(), rng_from_seed(3))
            .unwrap()
            .take(200)
            .collect();
        assert_eq!(a, b);
        assert!(matches!(
            WeightedSampler::new(&[1.2, -0.2], per_class, rng_from_seed(0)),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn sampler_argmax_matches_weights() {
        let w = [0.2, 0.45, 0.35];
        let per_class = vec![vec![0], vec![1], vec![2]];
        let mut s = WeightedSampler::<ChaCha8Rng>::new(&w, per_class, rng_from_seed(8)).unwrap();
        let mut freq = [0usize; 3];
        for _ in 0..100_000 {
            freq[s.draw_class()] += 1;
        }
        assert_eq!(freq.iter().enumerate().max_by_key(|(_, v)| **v).unwrap().0, 1);
    }

    #[test]
    fn spread_report_counts_pairs() {
        let mut rng = rng_from_seed(4);
        let rows: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let d = distance_matrix(&fm(&rows));
        let same = distance_matrix(&FeatureMatrix::from_rows(1, &vec![vec![0.5; 4]; 5]).unwrap());
        let rep = intra_class_spread_report(&[d.clone(), same], 10);
        assert_eq!(rep[0].counts.iter().sum::<u64>(), 36);
        assert_eq!(rep[1].counts.iter().sum::<u64>(), 10);
        assert_eq!((rep[1].counts[0], rep[1].mean), (10, 0.0));
        let ut = d.upper_triangle();
        let brute = ut.iter().sum::<f64>() / ut.len() as f64;
        assert!((rep[0].mean - brute).abs() < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        write_spread_report(dir.path(), &rep, &["a".into(), "b".into()]).unwrap();
        assert!(dir.path().join("spread_a.png").exists());
        let text = std::fs::read_to_string(dir.path().join("spread_b.csv")).unwrap();
        assert!(text.starts_with("bin_left,bin_right,count\n"));
    }

    #[test]
    fn teacher_is_deterministic() {
        let teacher = Teacher::new(TeacherConfig::default()).unwrap();
        let img = Image::filled(3, 8, 8, 0.25);
        let imgs = vec![&img; 3];
        let f = extract_features(&imgs, &teacher, 0).unwrap();
        assert_eq!((f.rows, f.dim), (3, 64));
        assert_eq!(f.row(0), f.row(2));
        assert_eq!(f, extract_features(&imgs, &teacher, 0).unwrap());
        let gray = Image::zeros(1, 8, 8);
        assert!(matches!(teacher.embed(&[&gray]), Err(Error::TeacherInputMismatch { .. })));
        assert_eq!(teacher.logits(&imgs).unwrap().shape(), &[3, 32]);
    }

    #[test]
    fn weight_table_csv() {
        let t = cibm_weights(&[3, 9], &[1.0 / 3.0, 123456.789]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("class_id,count,p,S,W\n0,3,0.250000000000,0.333333333333,"));
        let back = CategoryWeightTable::read_csv(&p).unwrap();
        assert_eq!(back.counts, t.counts);
        for (a, b) in back.w.iter().zip(&t.w) {
            assert!((a - b).abs() < 1e-11);
        }
        assert_eq!(format_significant(123456.789, 12), "123456.789000");
        assert_eq!(format_significant(1e-12, 12), "0.00000000000100000000000");
    }
}
