//! One PASS/FAIL line per acceptance criterion.
//!
//! `cargo test --test acceptance -- 3 5` runs a subset by number. The toy
//! runs (8 to 10) write under `$UBFINE_ACCEPTANCE_DIR`, or a temporary
//! directory that is removed afterwards.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use ubfine::cibm::*;
use ubfine::classifier::*;
use ubfine::diffusion::*;
use ubfine::image::Image;
use ubfine::metrics::*;
use ubfine::nn::Tensor;
use ubfine::orchestration::*;
use ubfine::seed::rng_from_seed;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

struct KnownNoise(Tensor);

impl Denoiser for KnownNoise {
    fn predict_noise(&self, _x: &Tensor, _y: &Tensor, _g: &[f32]) -> Tensor {
        self.0.clone()
    }
}

fn round_trip() -> Check {
    let mut rng = rng_from_seed(101);
    let shape = [1, 3, 4, 4];
    let mut worst = 0f64;
    for _ in 0..100 {
        let y0 = Tensor::from_vec(&shape, (0..48).map(|_| rng.random_range(-1.0f32..=1.0)).collect());
        let gamma = 1.0 - rng.random::<f64>();
        let eps = standard_normal(&shape, &mut rng);
        let y_t = forward_noise(&y0, gamma, &eps).map_err(|e| e.to_string())?;
        let x = Tensor::zeros(&shape);
        let est = estimate_y0(&x, &y_t, gamma, &KnownNoise(eps)).map_err(|e| e.to_string())?;
        for (a, b) in est.data().iter().zip(y0.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    ensure(worst <= 1e-6, format!("max abs error {worst:.3e} over 100 triples"))
}

// ---------------------------------------------------------------- 2

fn schedule() -> Check {
    let s = linear_schedule(2000, 1e-6, 1e-2).map_err(|e| e.to_string())?;
    let g = s.gammas();
    let decreasing = g.windows(2).all(|w| w[1] < w[0]);
    // Independent product: betas from the closed form, multiplied in order.
    let mut prod = 1.0f64;
    for t in 1..=2000 {
        let beta = 1e-6 + (1e-2 - 1e-6) * (t - 1) as f64 / 1999.0;
        prod *= 1.0 - beta;
    }
    let gt = s.gamma(2000).map_err(|e| e.to_string())?;
    let rel = (gt - prod).abs() / prod;
    ensure(
        decreasing && rel <= 1e-10,
        format!("strictly decreasing: {decreasing}, gamma_T {gt:.6e} vs {prod:.6e} (rel {rel:.1e})"),
    )
}

// ---------------------------------------------------------------- 3

fn brute_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in 0..n {
            let mut s = 0.0;
            for m in 0..rows[j].len() {
                s += (rows[j][m] - rows[k][m]).powi(2);
            }
            d[j][k] = s.sqrt();
        }
    }
    d
}

fn cibm_oracle() -> Check {
    let mut rng = rng_from_seed(303);
    let (mut dist_err, mut spread_err, mut w_err, mut sum_err, mut scale_err) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..50 {
        let classes = rng.random_range(2..=12);
        let dim = rng.random_range(1..=16);
        let mut counts = Vec::new();
        let mut dms = Vec::new();
        let mut brute_s = Vec::new();
        let mut brute_mean = Vec::new();
        for c in 0..classes {
            let n = rng.random_range(2..=40);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let dm = distance_matrix(&FeatureMatrix::from_rows(c, &rows).map_err(|e| e.to_string())?);
            let bd = brute_distances(&rows);
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    dist_err = dist_err.max((dm.get(j, k) - bd[j][k]).abs());
                    if j != k {
                        s += bd[j][k];
                    }
                }
            }
            brute_s.push(s);
            brute_mean.push(s / (n * (n - 1)) as f64);
            counts.push(n);
            dms.push(dm);
        }
        let spreads = compute_spreads(&dms, SpreadNorm::Sum);
        spread_err = spread_err
            .max(max_abs(&spreads, &brute_s))
            .max(max_abs(&compute_spreads(&dms, SpreadNorm::Mean), &brute_mean));
        let table = cibm_weights(&counts, &spreads).map_err(|e| e.to_string())?;
        let total: usize = counts.iter().sum();
        let raw: Vec<f64> = brute_s
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s / (n as f64 / total as f64))
            .collect();
        let z: f64 = raw.iter().sum();
        let brute_w: Vec<f64> = raw.iter().map(|r| r / z).collect();
        w_err = w_err.max(max_abs(&table.w, &brute_w));
        sum_err = sum_err.max((table.w.iter().sum::<f64>() - 1.0).abs());
        for scale in [1e-3, 7.25, 1e4] {
            let scaled: Vec<f64> = spreads.iter().map(|s| s * scale).collect();
            let t2 = cibm_weights(&counts, &scaled).map_err(|e| e.to_string())?;
            scale_err = scale_err.max(max_abs(&t2.w, &table.w));
        }
    }
    ensure(
        dist_err <= 1e-9 && spread_err <= 1e-9 && w_err <= 1e-9 && sum_err <= 1e-12 && scale_err <= 1e-12,
        format!(
            "distances {dist_err:.1e}, spreads {spread_err:.1e}, weights {w_err:.1e}, |sum W - 1| {sum_err:.1e}, scale {scale_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn sampler() -> Check {
    let per_class = vec![(0..30).collect(), (30..40).collect()];
    let mut s = WeightedSampler::new(&[0.75, 0.25], per_class, rng_from_seed(404)).map_err(|e| e.to_string())?;
    let n = 100_000;
    let ones = (0..n).filter(|_| s.draw_class() == 1).count();
    let f1 = ones as f64 / n as f64;
    let f0 = 1.0 - f1;
    ensure(
        (f0 - 0.75).abs() <= 0.01 && (f1 - 0.25).abs() <= 0.01,
        format!("frequencies [{f0:.4}, {f1:.4}] over {n} draws"),
    )
}

// ---------------------------------------------------------------- 5

fn central_diff(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    let mut v = z.to_vec();
    (0..z.len())
        .map(|i| {
            v[i] = z[i] + h;
            let up = f(&v);
            v[i] = z[i] - h;
            let down = f(&v);
            v[i] = z[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

fn randn(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn loss_identities() -> Check {
    let mut rng = rng_from_seed(505);
    let mut identities = true;
    let mut worst = 0f64;
    let sizes = [2, 3, 5, 6, 11, 17, 32, 64, 100, 128, 256, 500, 999, 1000, 1000, 7, 13, 40, 1000, 4];
    for (case, &ct) in sizes.iter().enumerate() {
        let k = 2 + case % 10;
        let n = 1 + case % 4;
        let zt: Vec<f32> = randn(&mut rng, n * k, 2.0).iter().map(|&v| v as f32).collect();
        let zd: Vec<f32> = randn(&mut rng, n * ct, 2.0).iter().map(|&v| v as f32).collect();
        let task = Tensor::from_vec(&[n, k], zt);
        let distill = Tensor::from_vec(&[n, ct], zd);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let hard: Vec<usize> = (0..n).map(|_| rng.random_range(0..ct)).collect();
        let targets: Vec<Target<'_>> = hard.iter().map(|&c| Target::Hard(c)).collect();
        let a0 = batch_loss(&task, &distill, &labels, &targets, 0.0).map_err(|e| e.to_string())?;
        let a1 = batch_loss(&task, &distill, &labels, &targets, 1.0).map_err(|e| e.to_string())?;
        identities &= a0.loss.to_bits() == a0.l_cls.to_bits() && a1.loss.to_bits() == a1.l_con.to_bits();
        let (lc, ll) = (a0.l_con, a0.l_cls);
        identities &= combined_loss(lc, ll, 0.0).unwrap().to_bits() == ll.to_bits()
            && combined_loss(lc, ll, 1.0).unwrap().to_bits() == lc.to_bits();

        let z = randn(&mut rng, ct, 3.0);
        let c = rng.random_range(0..ct);
        let g = contrastive_loss_grad(&z, c).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(&g, &central_diff(|z| contrastive_loss(z, c).unwrap(), &z, 1e-4)));
        let z = randn(&mut rng, k, 3.0);
        let y = rng.random_range(0..k);
        let g = classification_loss_grad(&z, y).map_err(|e| e.to_string())?;
        let fd = central_diff(|z| classification_loss_from_logits(z, y).unwrap(), &z, 1e-4);
        worst = worst.max(rel_err(&g, &fd));
    }
    ensure(
        identities && worst <= 1e-4,
        format!("bitwise alpha identities: {identities}, worst gradient rel error {worst:.2e} over 20 cases"),
    )
}

// ---------------------------------------------------------------- 6

const PUBLISHED: [[u64; 11]; 11] = [
    [102, 15, 13, 3, 6, 17, 14, 5, 13, 10, 2],
    [16, 104, 8, 8, 7, 19, 5, 5, 11, 12, 5],
    [17, 4, 115, 1, 7, 5, 24, 18, 4, 3, 2],
    [7, 1, 0, 143, 12, 3, 0, 0, 14, 13, 7],
    [0, 6, 10, 10, 158, 4, 3, 2, 1, 2, 4],
    [7, 13, 2, 6, 0, 106, 9, 3, 26, 8, 20],
    [15, 4, 29, 1, 7, 7, 123, 7, 2, 3, 2],
    [18, 6, 14, 0, 7, 1, 0, 150, 3, 0, 1],
    [16, 9, 4, 3, 3, 34, 3, 4, 91, 13, 20],
    [7, 11, 1, 11, 4, 10, 3, 1, 15, 118, 19],
    [3, 6, 4, 8, 3, 18, 10, 1, 14, 13, 120],
];

fn published_matrix() -> Check {
    let cm = ConfusionMatrix::from_counts(PUBLISHED.iter().map(|r| r.to_vec()).collect()).map_err(|e| e.to_string())?;
    let top1 = 100.0 * cm.accuracy();
    let lp = 100.0 * precision_recall_f1(&cm).recall[4];
    ensure(
        (top1 - 60.45).abs() <= 0.01 && (lp - 79.0).abs() <= 0.1,
        format!("Top-1 {top1:.4}%, LP recall {lp:.2}%"),
    )
}

// ---------------------------------------------------------------- 7

fn brute_ssim(a: &Image, b: &Image, l: f64) -> f64 {
    let (ch, h, w) = a.dims();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let g = |d: i64| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut wsum, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5i64 {
                    for dx in -5..=5i64 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let wt = g(dy) * g(dx);
                        let u = a.get(c, yy as usize, xx as usize) as f64;
                        let v = b.get(c, yy as usize, xx as usize) as f64;
                        wsum += wt;
                        ma += wt * u;
                        mb += wt * v;
                        aa += wt * u * u;
                        bb += wt * v * v;
                        ab += wt * u * v;
                    }
                }
                let (ma, mb, aa, bb, ab) = (ma / wsum, mb / wsum, aa / wsum, bb / wsum, ab / wsum);
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / (h * w) as f64;
    }
    total / ch as f64
}

fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).unwrap()
}

fn metrics_oracle() -> Check {
    let mut rng = rng_from_seed(707);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let v = worst.entry(k).or_insert(0.0);
        *v = v.max(e);
    };
    for _ in 0..50 {
        let k = rng.random_range(2..=8);
        let n = rng.random_range(1..=60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let cm = confusion(&preds, &labels, k).map_err(|e| e.to_string())?;
        let mut brute = vec![vec![0u64; k]; k];
        for i in 0..n {
            brute[labels[i]][preds[i]] += 1;
        }
        note("confusion", if cm.counts() == brute.as_slice() { 0.0 } else { f64::INFINITY });
        let s = precision_recall_f1(&cm);
        for c in 0..k {
            let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count() as f64;
            let pp = (0..n).filter(|&i| preds[i] == c).count() as f64;
            let ap = (0..n).filter(|&i| labels[i] == c).count() as f64;
            let p = if pp > 0.0 { tp / pp } else { 0.0 };
            let r = if ap > 0.0 { tp / ap } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            note("precision", (s.precision[c] - p).abs());
            note("recall", (s.recall[c] - r).abs());
            note("f1", (s.f1[c] - f).abs());
        }

        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=5) * 2, rng.random_range(2..=5) * 2);
        let a = random_image(&mut rng, c, h, w);
        let b = random_image(&mut rng, c, h, w);
        let m: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        note("psnr", (psnr(&a, &b, 2.0).unwrap() - 10.0 * (4.0 / m).log10()).abs());
        note("ssim", (ssim(&a, &b).unwrap() - brute_ssim(&a, &b, 2.0)).abs());

        let factor = 2;
        let lr = random_image(&mut rng, c, h / factor, w / factor);
        let mut acc = 0.0;
        for ch in 0..c {
            for y in 0..h / factor {
                for x in 0..w / factor {
                    let mut block = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            block += a.get(ch, y * factor + dy, x * factor + dx) as f64;
                        }
                    }
                    let block = (block / (factor * factor) as f64) as f32;
                    acc += (lr.get(ch, y, x) as f64 - block as f64).powi(2);
                }
            }
        }
        let brute_cons = acc / lr.data().len() as f64 / 1e-5;
        note("consistency", (consistency(&lr, &a, factor).unwrap() - brute_cons).abs());
    }
    let ok = worst.values().all(|&e| e <= 1e-9);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(ok, format!("worst errors over 50 instances: {detail}"))
}

// ---------------------------------------------------------------- 8 to 10

fn sr_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.out = out.to_path_buf();
    cfg.data.synth.counts = vec![334, 334, 333, 333, 333, 333];
    cfg.data.synth.seed = 8;
    cfg.eval.folds = vec![0];
    cfg.sr.scope = SrScope::Test;
    cfg
}

fn pipeline_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 9;
    cfg.out = out.to_path_buf();
    cfg.data.synth.seed = 9;
    cfg.eval.folds = vec![0];
    cfg.ablate.sr_methods = vec![SrMethod::Bicubic];
    cfg
}

fn toy_sr(out: &Path) -> Check {
    let cfg = sr_config(out);
    let opts = CommandOptions::default();
    let t0 = Instant::now();
    cmd_train_sr(&cfg, &opts).map_err(|e| e.to_string())?;
    let s = cmd_super_resolve(&cfg, &opts).map_err(|e| e.to_string())?;
    let gain = s.psnr - s.bicubic_psnr;
    ensure(
        gain >= 0.3 && s.consistency <= 2.0 * s.bicubic_consistency,
        format!(
            "PSNR {:.3} vs bicubic {:.3} dB ({gain:+.3}), consistency {:.3} vs bicubic {:.3}, {} held-out tiles, {} steps, {:.0} s",
            s.psnr,
            s.bicubic_psnr,
            s.consistency,
            s.bicubic_consistency,
            s.n,
            cfg.sr.steps,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn toy_pipeline(out: &Path) -> Check {
    let cfg = pipeline_config(out);
    let t0 = Instant::now();
    let rows = cmd_ablate(&cfg, &CommandOptions::default()).map_err(|e| e.to_string())?;
    let find = |cibm: bool, cs: bool| rows.iter().find(|r| r.cibm == cibm && r.cs == cs);
    let (Some(base), Some(full)) = (find(false, false), find(true, true)) else {
        return Err("baseline or full cell missing".into());
    };
    let abl = out.join("ablation");
    let md = std::fs::read_to_string(abl.join("ablation.md")).map_err(|e| e.to_string())?;
    let header: Vec<String> = csv::Reader::from_path(abl.join("ablation.csv"))
        .and_then(|mut r| r.headers().map(|h| h.iter().map(String::from).collect()))
        .map_err(|e| e.to_string())?;
    let reports = [&base.name, &full.name].iter().all(|n| {
        let eval = fold_dir(&abl.join(n), 0).join(EVAL_DIR);
        ["metrics.csv", "confusion_matrix.csv", "per_class.csv", "per_class.png"]
            .iter()
            .all(|f| eval.join(f).exists())
    });
    let deltas = md.contains("(+0.0%)") && header.iter().any(|h| h == "d_top1");
    let cell = |n: &str| RunConfig::load(&abl.join(n).join(CONFIG_ECHO)).map(|c| (c.classifier.sampler, c.classifier.alpha));
    let switches = matches!(cell(&base.name), Ok((SamplerKind::Uniform, a)) if a == 0.0)
        && matches!(cell(&full.name), Ok((SamplerKind::Cibm, a)) if a == 0.7);
    let counts = &cfg.data.synth.counts;
    let ratio = counts.iter().max().unwrap() / counts.iter().min().unwrap();
    ensure(
        reports && deltas && switches,
        format!(
            "{} classes at {ratio}:1; baseline top1 {:.4} vs full {:.4}; minority recall baseline {:.4} vs full {:.4}; reports {reports}, delta columns {deltas}, {:.0} s",
            counts.len(),
            base.metrics.top1,
            full.metrics.top1,
            base.metrics.minority_recall,
            full.metrics.minority_recall,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn metric_csvs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn reproducible(first: &Path, second: &Path) -> Check {
    if !first.exists() {
        toy_sr(&first.join("sr")).ok();
        toy_pipeline(&first.join("pipeline")).ok();
    }
    let opts = CommandOptions::default();
    let sr = sr_config(&second.join("sr"));
    cmd_train_sr(&sr, &opts).map_err(|e| e.to_string())?;
    cmd_super_resolve(&sr, &opts).map_err(|e| e.to_string())?;
    cmd_ablate(&pipeline_config(&second.join("pipeline")), &opts).map_err(|e| e.to_string())?;
    let (a, b) = (metric_csvs(first), metric_csvs(second));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    ensure(
        !a.is_empty() && differing.is_empty(),
        format!("{} CSVs compared, differing: {differing:?}", a.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let (_tmp, work) = match std::env::var_os("UBFINE_ACCEPTANCE_DIR") {
        Some(d) => (None, PathBuf::from(d)),
        None => {
            let t = tempfile::tempdir().unwrap();
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    std::env::set_var("UBFINE_CACHE", work.join("cache"));
    let first = work.join("first");
    let second = work.join("second");
    for d in [&first, &second] {
        if d.exists() {
            std::fs::remove_dir_all(d).unwrap();
        }
    }

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "diffusion round trip", Box::new(round_trip)),
        (2, "noise schedule", Box::new(schedule)),
        (3, "CIBM oracle equivalence", Box::new(cibm_oracle)),
        (4, "sampler statistics", Box::new(sampler)),
        (5, "loss identities and gradients", Box::new(loss_identities)),
        (6, "published confusion matrix", Box::new(published_matrix)),
        (7, "metrics oracle equivalence", Box::new(metrics_oracle)),
        (8, "toy SR efficacy", Box::new(|| toy_sr(&first.join("sr")))),
        (9, "toy pipeline end to end", Box::new(|| toy_pipeline(&first.join("pipeline")))),
        (10, "reproducibility", Box::new(|| reproducible(&first, &second))),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !run(n) {
            continue;
        }
        let t0 = Instant::now();
        let result = check();
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
