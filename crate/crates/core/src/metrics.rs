//! Classification accounting and image-quality measures.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Peak-to-peak range of `[-1, 1]` pixels.
pub const UNIT_PEAK: f64 = 2.0;
/// Consistency is reported in units of this MSE.
pub const CONSISTENCY_UNIT: f64 = 1e-5;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != k) {
            return Err(Error::LengthMismatch {
                left: row.len(),
                right: k,
            });
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

/// Fraction of samples whose label is among the first `k` ranked classes.
pub fn topk_accuracy(ranked: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: ranked.len(),
            right: labels.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top-k needs k >= 1".into()));
    }
    let mut hits = 0usize;
    for (i, (r, &y)) in ranked.iter().zip(labels).enumerate() {
        if r.len() < k {
            return Err(Error::RankTooShort {
                index: i,
                len: r.len(),
                k,
            });
        }
        if r[..k].contains(&y) {
            hits += 1;
        }
    }
    Ok(if labels.is_empty() {
        0.0
    } else {
        hits as f64 / labels.len() as f64
    })
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &y) in preds.iter().zip(labels) {
        for v in [p, y] {
            if v >= k {
                return Err(Error::IndexOutOfRange { index: v, len: k });
            }
        }
        cm.counts[y][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Set where a ratio had a zero denominator and was reported as 0.
    pub zero_division: Vec<bool>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

/// Per-class scores and their unweighted means.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassScores {
    let k = cm.num_classes();
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let ratio = |num: f64, den: f64, flag: &mut bool| {
        if den == 0.0 {
            *flag = true;
            0.0
        } else {
            num / den
        }
    };
    let mut out = ClassScores {
        precision: Vec::with_capacity(k),
        recall: Vec::with_capacity(k),
        f1: Vec::with_capacity(k),
        zero_division: Vec::with_capacity(k),
        mean_precision: 0.0,
        mean_recall: 0.0,
        mean_f1: 0.0,
    };
    for c in 0..k {
        let mut flag = false;
        let tp = cm.get(c, c) as f64;
        let p = ratio(tp, cols[c] as f64, &mut flag);
        let r = ratio(tp, rows[c] as f64, &mut flag);
        let f = ratio(2.0 * p * r, p + r, &mut flag);
        out.precision.push(p);
        out.recall.push(r);
        out.f1.push(f);
        out.zero_division.push(flag);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    out.mean_precision = mean(&out.precision);
    out.mean_recall = mean(&out.recall);
    out.mean_f1 = mean(&out.f1);
    out
}

fn check_mse_inputs(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.data().is_empty() {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_mse_inputs(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut g = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Gaussian-weighted local mean. Near the border the window is cut to the
/// image and its weights renormalised; the 2-D window is separable, so the
/// cut and the renormalisation are too.
fn local_mean(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if along_rows { (x, w) } else { (y, h) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for d in -r..=r {
                    let q = pos as isize + d;
                    if q < 0 || q >= len as isize {
                        continue;
                    }
                    let wt = taps[(d + r) as usize];
                    let v = if along_rows {
                        src[y * w + q as usize]
                    } else {
                        src[q as usize * w + x]
                    };
                    acc += wt * v;
                    norm += wt;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Single-scale SSIM for `[-1, 1]` images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_range(a, b, UNIT_PEAK)
}

/// Single-scale SSIM, 11x11 Gaussian window with sigma 1.5,
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, averaged over pixels then channels.
pub fn ssim_with_range(a: &Image, b: &Image, dynamic_range: f64) -> Result<f64> {
    check_mse_inputs(a, b)?;
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let taps = gaussian_taps();
    let (channels, h, w) = a.dims();
    let mut total = 0.0;
    for c in 0..channels {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = local_mean(&pa, h, w, &taps);
        let mu_b = local_mean(&pb, h, w, &taps);
        let e_aa = local_mean(&prod(&pa, &pa), h, w, &taps);
        let e_bb = local_mean(&prod(&pb, &pb), h, w, &taps);
        let e_ab = local_mean(&prod(&pa, &pb), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (h * w) as f64;
    }
    Ok(total / channels as f64)
}

/// MSE between `lr` and the area-downsampled `sr`, in units of 1e-5.
pub fn consistency(lr: &Image, sr: &Image, factor: usize) -> Result<f64> {
    let (c, h, w) = lr.dims();
    if sr.dims() != (c, h * factor, w * factor) {
        return Err(Error::ShapeMismatch(format!(
            "SR {:?} is not {factor}x LR {:?}",
            sr.dims(),
            lr.dims()
        )));
    }
    Ok(mse(lr, &sr.area_downsample(factor)?)? / CONSISTENCY_UNIT)
}

/// Ranking-based classification summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub top1: f64,
    pub top5: f64,
    /// Rank depth used for `top5`; smaller than 5 when there are fewer
    /// classes.
    pub top5_depth: usize,
    pub n1: usize,
    pub n5: usize,
    pub nt: usize,
    pub scores: ClassScores,
    pub confusion: ConfusionMatrix,
}

impl EvaluationReport {
    /// `ranked[i]` lists class ids for sample `i`, most probable first.
    pub fn from_rankings(ranked: &[Vec<usize>], labels: &[usize], k: usize) -> Result<Self> {
        let depth = k.min(5);
        let top1 = topk_accuracy(ranked, labels, 1)?;
        let top5 = topk_accuracy(ranked, labels, depth)?;
        let preds: Vec<usize> = ranked.iter().map(|r| r[0]).collect();
        let cm = confusion(&preds, labels, k)?;
        let nt = labels.len();
        let n5 = ranked
            .iter()
            .zip(labels)
            .filter(|(r, y)| r[..depth].contains(y))
            .count();
        Ok(Self {
            top1,
            top5,
            top5_depth: depth,
            n1: cm.trace() as usize,
            n5,
            nt,
            scores: precision_recall_f1(&cm),
            confusion: cm,
        })
    }

    /// `(metric, value)` rows of `metrics.csv`.
    pub fn summary_rows(&self) -> Vec<(String, f64)> {
        vec![
            ("top1".into(), self.top1),
            ("top5".into(), self.top5),
            ("mean_precision".into(), self.scores.mean_precision),
            ("mean_recall".into(), self.scores.mean_recall),
            ("mean_f1".into(), self.scores.mean_f1),
            ("n1".into(), self.n1 as f64),
            ("n5".into(), self.n5 as f64),
            ("nt".into(), self.nt as f64),
        ]
    }

    /// `metrics.csv`, `confusion_matrix.csv` and `per_class.csv` in `dir`.
    pub fn write(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &self.summary_rows())?;
        write_confusion_csv(&dir.join("confusion_matrix.csv"), &self.confusion, class_names)?;
        write_per_class_csv(&dir.join("per_class.csv"), &self.scores, class_names)?;
        Ok(())
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(cm.counts()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_confusion_csv(path: &Path) -> Result<(Vec<String>, ConfusionMatrix)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut counts = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|e| Error::MissingData(format!("bad confusion entry `{v}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        counts.push(row);
    }
    Ok((names, ConfusionMatrix::from_counts(counts)?))
}

pub fn write_per_class_csv(path: &Path, s: &ClassScores, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "precision", "recall", "f1"])?;
    for (i, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            s.precision[i].to_string(),
            s.recall[i].to_string(),
            s.f1[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
