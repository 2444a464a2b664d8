//! Per-fold stages shared by the commands and the ablation runner.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DataSource, RunConfig, SrMethod, SrScope};
use crate::cibm::{
    frequency_table, intra_class_spread_report, weights_for_split, write_spread_report, CategoryWeightTable,
    Teacher,
};
use crate::classifier::{
    eval_view, load_classifier, predict_batch, save_classifier, teacher_targets_cached, train_classifier_observed,
    write_training_log, ClassifierMeta, DualHeadClassifier, SamplerKind, TrainedClassifier,
};
use crate::data::{
    downsample_dataset, load_dataset, make_splits, synth_generate, tile_path, upscale_lr, LabeledDataset,
    SplitAssignment,
};
use crate::diffusion::{correct_deviation, super_resolve, train_denoiser_observed, DomainStats, SrCheckpoint};
use crate::error::{Error, Result};
use crate::image::{Image, Interpolation};
use crate::metrics::{consistency, psnr, ssim, write_metrics_csv, EvaluationReport, UNIT_PEAK};
use crate::nn::Tensor;
use crate::plot::grouped_bars;
use crate::seed::derived_rng;

pub const SR_CHECKPOINT_DIR: &str = "sr_checkpoint";
pub const SR_IMAGE_DIR: &str = "sr";
pub const SR_METRICS_FILE: &str = "sr_metrics.csv";
pub const SR_SUMMARY_FILE: &str = "sr_summary.csv";
pub const WEIGHTS_FILE: &str = "cibm_weights.csv";
pub const SPREAD_DIR: &str = "spread";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const EVAL_DIR: &str = "eval";

pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold_{fold}"))
}

/// HR tiles, their LR counterparts and the fold assignment.
pub struct RunData {
    pub hr: LabeledDataset,
    pub lr: LabeledDataset,
    pub factor: usize,
    pub splits: SplitAssignment,
}

impl RunData {
    pub fn class_names(&self) -> &[String] {
        &self.hr.class_names
    }

    /// Class with the fewest tiles, lowest index on ties.
    pub fn minority_class(&self) -> usize {
        let counts = self.hr.class_counts();
        (0..counts.len()).min_by_key(|&c| counts[c]).unwrap_or(0)
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let (hr, lr, factor) = match cfg.data.source {
        DataSource::Synthetic => {
            let out = synth_generate(&cfg.data.synth)?;
            (out.hr, out.lr, cfg.data.synth.scale_factor)
        }
        DataSource::Archive => {
            let root = &cfg.data.root;
            let hr = load_dataset(&root.join("hr"), &root.join("manifest.csv"), cfg.data.gsd_meters)?;
            let lr = downsample_dataset(&hr, cfg.data.scale_factor)?;
            (hr, lr, cfg.data.scale_factor)
        }
    };
    let splits = make_splits(&hr, cfg.data.folds, cfg.seed)?;
    Ok(RunData { hr, lr, factor, splits })
}

/// Bicubic upscale, then moment matching onto `stats` when given.
pub fn conditioning_inputs(lr: &[&Image], factor: usize, stats: Option<&DomainStats>) -> Result<Tensor> {
    let up = lr
        .iter()
        .map(|img| img.upscale(factor, Interpolation::Bicubic))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::from_images(&up);
    match stats {
        Some(s) => correct_deviation(&x, s),
        None => Ok(x),
    }
}

fn sample_rng(seed: u64, sample_id: &str) -> rand_chacha::ChaCha8Rng {
    derived_rng(seed, &format!("sr/{sample_id}"))
}

#[derive(Serialize)]
struct SrLogRow {
    step: usize,
    lr: f32,
    loss: f64,
}

/// Train the denoiser on the fold's training pairs and save it under
/// `dir/sr_checkpoint`.
pub fn train_sr_fold(cfg: &RunConfig, data: &RunData, fold: usize, dir: &Path) -> Result<SrCheckpoint> {
    let (train, _) = data.splits.train_test(&data.hr, fold);
    let lr: Vec<&Image> = train.iter().map(|&i| &data.lr.tiles[i].pixels).collect();
    let x = conditioning_inputs(&lr, data.factor, None)?.to_images();
    let pairs: Vec<(Image, Image)> = x
        .into_iter()
        .zip(&train)
        .map(|(x, &i)| (x, data.hr.tiles[i].pixels.clone()))
        .collect();
    let schedule = cfg.sr.schedule()?;
    let opts = cfg.sr.train_options(cfg.seed)?;
    let total = opts.steps;
    let (mut ckpt, log) = train_denoiser_observed(&pairs, &schedule, cfg.sr.unet, &opts, &mut |e| {
        if e.step % 100 == 0 || e.step == total {
            log::info!("fold {fold} SR step {}/{total} loss {:.5}", e.step, e.loss);
        }
    })?;
    std::fs::create_dir_all(dir)?;
    ckpt.save(&dir.join(SR_CHECKPOINT_DIR))?;
    let mut w = csv::Writer::from_path(dir.join("sr_train_log.csv"))?;
    for e in &log {
        w.serialize(SrLogRow {
            step: e.step,
            lr: e.lr,
            loss: e.loss,
        })?;
    }
    w.flush()?;
    Ok(ckpt)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SrMetricRow {
    pub sample_id: String,
    pub class: String,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub bicubic_consistency: f64,
}

/// Means over the held-out fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SrSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub bicubic_consistency: f64,
    pub n: usize,
}

impl SrSummary {
    fn from_rows(rows: &[SrMetricRow]) -> Self {
        let n = rows.len();
        let mean = |f: fn(&SrMetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n.max(1) as f64;
        Self {
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            consistency: mean(|r| r.consistency),
            bicubic_psnr: mean(|r| r.bicubic_psnr),
            bicubic_ssim: mean(|r| r.bicubic_ssim),
            bicubic_consistency: mean(|r| r.bicubic_consistency),
            n,
        }
    }

    pub fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("psnr".into(), self.psnr),
            ("ssim".into(), self.ssim),
            ("consistency".into(), self.consistency),
            ("bicubic_psnr".into(), self.bicubic_psnr),
            ("bicubic_ssim".into(), self.bicubic_ssim),
            ("bicubic_consistency".into(), self.bicubic_consistency),
            ("n".into(), self.n as f64),
        ]
    }
}

/// Super-resolve the fold with `ckpt`, writing one 8-bit PNG per tile to
/// `dir/sr/<class>/<id>.png` and per-image metrics for the held-out tiles.
pub fn super_resolve_fold(
    cfg: &RunConfig,
    data: &RunData,
    fold: usize,
    ckpt: &SrCheckpoint,
    dir: &Path,
) -> Result<SrSummary> {
    let schedule = cfg.sr.schedule()?;
    let (train, test) = data.splits.train_test(&data.hr, fold);
    let mut indices = test.clone();
    if cfg.sr.scope == SrScope::All {
        indices.extend(&train);
    }
    let lr: Vec<&Image> = indices.iter().map(|&i| &data.lr.tiles[i].pixels).collect();
    let stats = cfg.sr.deviation_correction.then_some(&ckpt.meta.domain_stats);
    let x_all = conditioning_inputs(&lr, data.factor, stats)?.to_images();
    let img_dir = dir.join(SR_IMAGE_DIR);
    let mut rows = Vec::with_capacity(test.len());
    let mut done = 0;
    for (chunk_idx, chunk) in indices.chunks(cfg.sr.inference_batch).enumerate() {
        let start = chunk_idx * cfg.sr.inference_batch;
        let x = Tensor::from_images(&x_all[start..start + chunk.len()]);
        let mut rngs: Vec<_> = chunk
            .iter()
            .map(|&i| sample_rng(cfg.seed, &data.hr.tiles[i].sample_id))
            .collect();
        let y = super_resolve(&x, ckpt, &schedule, &mut rngs)?.to_images();
        for (j, (&i, mut sr)) in chunk.iter().zip(y).enumerate() {
            sr.quantize_u8();
            let hr = &data.hr.tiles[i];
            let class = &data.hr.class_names[hr.class_id];
            let path = img_dir.join(tile_path(class, &hr.sample_id));
            std::fs::create_dir_all(path.parent().expect("tile path has a parent"))?;
            sr.write_png(&path)?;
            if start + j < test.len() {
                let lr_img = &data.lr.tiles[i].pixels;
                let mut bic = lr_img.upscale(data.factor, Interpolation::Bicubic)?;
                bic.quantize_u8();
                rows.push(SrMetricRow {
                    sample_id: hr.sample_id.clone(),
                    class: class.clone(),
                    psnr: psnr(&sr, &hr.pixels, UNIT_PEAK)?,
                    ssim: ssim(&sr, &hr.pixels)?,
                    consistency: consistency(lr_img, &sr, data.factor)?,
                    bicubic_psnr: psnr(&bic, &hr.pixels, UNIT_PEAK)?,
                    bicubic_ssim: ssim(&bic, &hr.pixels)?,
                    bicubic_consistency: consistency(lr_img, &bic, data.factor)?,
                });
            }
        }
        done += chunk.len();
        log::info!("fold {fold} super-resolved {done}/{}", indices.len());
    }
    let mut w = csv::Writer::from_path(dir.join(SR_METRICS_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary = SrSummary::from_rows(&rows);
    write_metrics_csv(&dir.join(SR_SUMMARY_FILE), &summary.rows())?;
    Ok(summary)
}

/// Classifier inputs at HR size for every tile: bicubic upscales, or the
/// PNGs previously written under `sr_fold_dir/sr`.
pub fn classifier_inputs(
    method: SrMethod,
    data: &RunData,
    sr_fold_dir: &Path,
) -> Result<LabeledDataset> {
    let mut out = data.lr.clone();
    for (tile, hr) in out.tiles.iter_mut().zip(&data.hr.tiles) {
        *tile = match method {
            SrMethod::Bicubic => upscale_lr(tile, data.factor, Interpolation::Bicubic)?,
            SrMethod::Diffusion => {
                let class = &data.hr.class_names[hr.class_id];
                let path = sr_fold_dir.join(SR_IMAGE_DIR).join(tile_path(class, &hr.sample_id));
                if !path.exists() {
                    return Err(Error::MissingData(format!(
                        "no super-resolved image {}; run super-resolve with sr.scope = \"all\"",
                        path.display()
                    )));
                }
                let mut t = hr.clone();
                t.pixels = Image::read_png(&path)?;
                t
            }
        };
    }
    Ok(out)
}

/// Teacher-embedding weight table for the training tiles, plus the spread
/// report.
pub fn cibm_weights_fold(cfg: &RunConfig, train: &LabeledDataset, dir: &Path) -> Result<CategoryWeightTable> {
    let teacher = Teacher::new(cfg.cibm.teacher.clone())?;
    let images: Vec<&Image> = train.tiles.iter().map(|t| &t.pixels).collect();
    let (table, dms) = weights_for_split(&images, &train.labels(), train.num_classes(), &teacher, cfg.cibm.spread_norm)?;
    std::fs::create_dir_all(dir)?;
    table.write_csv(&dir.join(WEIGHTS_FILE))?;
    let report = intra_class_spread_report(&dms, cfg.cibm.bins());
    write_spread_report(&dir.join(SPREAD_DIR), &report, &train.class_names)?;
    Ok(table)
}

pub fn cache_dir(root: &Path) -> PathBuf {
    std::env::var_os("UBFINE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("cache"))
}

/// Train a classifier on the fold's training tiles and save it under
/// `dir/classifier`.
pub fn train_cls_fold(
    cfg: &RunConfig,
    train: &LabeledDataset,
    dir: &Path,
    cache: &Path,
) -> Result<TrainedClassifier> {
    let tc = cfg.classifier_for(train.num_classes())?;
    let counts = train.class_counts();
    let table = if tc.sampler == SamplerKind::Cibm {
        let path = dir.join(WEIGHTS_FILE);
        if !path.exists() {
            return Err(Error::MissingData(format!(
                "{} not found; run cibm-weights first",
                path.display()
            )));
        }
        CategoryWeightTable::read_csv(&path)?
    } else {
        frequency_table(&counts)?
    };
    if table.counts != counts {
        return Err(Error::ConfigMismatch(format!(
            "weight table counts {:?} differ from the training split {:?}",
            table.counts, counts
        )));
    }
    let teacher = Teacher::new(cfg.cibm.teacher.clone())?;
    let targets = teacher_targets_cached(train, &teacher, tc.soft_targets, cache)?;
    let epochs = tc.epochs;
    let mut trained = train_classifier_observed(&tc, train, &table, &targets, &mut |e| {
        log::info!(
            "epoch {}/{epochs} lr {:.2e} loss {:.4} train top1 {:.3}",
            e.epoch,
            e.lr,
            e.loss,
            e.train_top1
        );
    })?;
    std::fs::create_dir_all(dir)?;
    write_training_log(&dir.join("training_log.csv"), &trained.log)?;
    let mut w = csv::Writer::from_path(dir.join("class_draws.csv"))?;
    let mut header = vec!["epoch".to_string()];
    header.extend(train.class_names.iter().cloned());
    w.write_record(&header)?;
    for (e, draws) in trained.class_draws.iter().enumerate() {
        let mut rec = vec![(e + 1).to_string()];
        rec.extend(draws.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let last = trained.log.last().expect("at least one epoch");
    let meta = ClassifierMeta {
        config: tc.clone(),
        epoch: last.epoch,
        seed: tc.seed,
        class_names: train.class_names.clone(),
        metrics: [("loss".to_string(), last.loss), ("train_top1".to_string(), last.train_top1)]
            .into_iter()
            .collect(),
    };
    save_classifier(&dir.join(CLASSIFIER_DIR), &mut trained.model, &meta)?;
    Ok(trained)
}

pub fn load_fold_classifier(dir: &Path) -> Result<(DualHeadClassifier, ClassifierMeta)> {
    load_classifier(&dir.join(CLASSIFIER_DIR))
}

/// Evaluate on the held-out tiles and write `dir/eval`.
pub fn eval_fold(model: &DualHeadClassifier, test: &LabeledDataset, dir: &Path) -> Result<EvaluationReport> {
    let size = model.config().input_size;
    if model.config().num_classes != test.num_classes() {
        return Err(Error::ConfigMismatch(format!(
            "classifier has {} classes, evaluation data {}",
            model.config().num_classes,
            test.num_classes()
        )));
    }
    let imgs = test
        .tiles
        .iter()
        .map(|t| eval_view(&t.pixels, size))
        .collect::<Result<Vec<_>>>()?;
    let ranked = predict_batch(model, &imgs)?;
    let ids: Vec<Vec<usize>> = ranked.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
    let labels = test.labels();
    let report = EvaluationReport::from_rankings(&ids, &labels, test.num_classes())?;
    let out = dir.join(EVAL_DIR);
    report.write(&out, &test.class_names)?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["sample_id", "label", "pred", "p_pred"])?;
    for ((t, r), &y) in test.tiles.iter().zip(&ranked).zip(&labels) {
        w.write_record([
            t.sample_id.as_str(),
            &test.class_names[y],
            &test.class_names[r[0].0],
            &format!("{:.6}", r[0].1),
        ])?;
    }
    w.flush()?;
    per_class_plot(&out.join("per_class.png"), &report)?;
    Ok(report)
}

/// Precision, recall and F1 bars per class.
pub fn per_class_plot(path: &Path, report: &EvaluationReport) -> Result<()> {
    let s = &report.scores;
    grouped_bars(path, &[s.precision.clone(), s.recall.clone(), s.f1.clone()], 1.0)
}

pub struct FoldOutcome {
    pub fold: usize,
    pub report: EvaluationReport,
}

/// CIBM weights (when sampled by them), training and evaluation for every
/// selected fold, reading SR images from `sr_root/fold_<k>`.
pub fn classify_folds(cfg: &RunConfig, data: &RunData, root: &Path, sr_root: &Path) -> Result<Vec<FoldOutcome>> {
    let cache = cache_dir(root);
    let mut out = Vec::new();
    for fold in cfg.fold_list() {
        let dir = fold_dir(root, fold);
        let inputs = classifier_inputs(cfg.sr.method, data, &fold_dir(sr_root, fold))?;
        let (train, test) = data.splits.train_test(&data.hr, fold);
        let (train, test) = (inputs.subset(&train), inputs.subset(&test));
        if cfg.classifier.sampler == SamplerKind::Cibm {
            cibm_weights_fold(cfg, &train, &dir)?;
        }
        let trained = train_cls_fold(cfg, &train, &dir, &cache)?;
        let report = eval_fold(&trained.model, &test, &dir)?;
        log::info!("fold {fold}: top1 {:.4} top5 {:.4}", report.top1, report.top5);
        out.push(FoldOutcome { fold, report });
    }
    Ok(out)
}
