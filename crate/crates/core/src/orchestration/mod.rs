//! Commands behind the CLI. Each one validates the configuration, echoes
//! it into the output directory, refuses to clobber earlier output unless
//! asked to, and finishes by hashing everything it left behind.

mod artifacts;
mod config;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};

pub use artifacts::{
    claim, sha256_file, verify_file_manifest, write_file_manifest, ManifestRow, CONFIG_ECHO, CONFIG_SOURCE,
    MANIFEST_FILE,
};
pub use config::{
    AblateConfig, CibmConfig, DataConfig, DataSource, EvalConfig, RunConfig, SrConfig, SrMethod, SrScope,
};
pub use pipeline::{
    cache_dir, cibm_weights_fold, classifier_inputs, classify_folds, conditioning_inputs, eval_fold, fold_dir,
    load_data, load_fold_classifier, per_class_plot, super_resolve_fold, train_cls_fold, train_sr_fold,
    FoldOutcome, RunData, SrMetricRow, SrSummary, CLASSIFIER_DIR, EVAL_DIR, SPREAD_DIR, SR_CHECKPOINT_DIR,
    SR_IMAGE_DIR, SR_METRICS_FILE, SR_SUMMARY_FILE, WEIGHTS_FILE,
};
pub use report::{
    ablation_markdown, delta_percent, format_delta, render_report, write_ablation, write_fold_tables, AblationRow,
    Headline,
};

use crate::diffusion::SrCheckpoint;
use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, write_metrics_csv, EvaluationReport};

#[derive(Clone, Debug, Default)]
pub struct CommandOptions {
    pub overwrite: bool,
    /// Text of the config file as given, echoed next to the resolved copy.
    pub config_source: Option<String>,
}

fn begin(cfg: &RunConfig, opts: &CommandOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let root = cfg.out.clone();
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join(CONFIG_ECHO), cfg.to_toml())?;
    if let Some(src) = &opts.config_source {
        std::fs::write(root.join(CONFIG_SOURCE), src)?;
    }
    Ok(root)
}

fn finish(root: &Path) -> Result<()> {
    write_file_manifest(root)?;
    Ok(())
}

fn require_diffusion(cfg: &RunConfig) -> Result<()> {
    if cfg.sr.method != SrMethod::Diffusion {
        return Err(Error::InvalidConfig(
            "sr.method = \"bicubic\" has no SR model to train or run".into(),
        ));
    }
    Ok(())
}

/// Generate the synthetic dataset into `<out>/data/<name>`.
pub fn cmd_synth(cfg: &RunConfig, opts: &CommandOptions) -> Result<PathBuf> {
    let root = begin(cfg, opts)?;
    let target = root.join("data");
    claim(&target, opts.overwrite)?;
    let dir = crate::data::synth_generate(&cfg.data.synth)?.write_archive(&target)?;
    finish(&root)?;
    Ok(dir)
}

pub fn cmd_train_sr(cfg: &RunConfig, opts: &CommandOptions) -> Result<()> {
    require_diffusion(cfg)?;
    let root = begin(cfg, opts)?;
    let data = load_data(cfg)?;
    let folds = cfg.fold_list();
    for &fold in &folds {
        claim(&fold_dir(&root, fold).join(SR_CHECKPOINT_DIR), opts.overwrite)?;
    }
    for fold in folds {
        train_sr_fold(cfg, &data, fold, &fold_dir(&root, fold))?;
    }
    finish(&root)
}

fn write_sr_table(root: &Path, per_fold: &[(usize, SrSummary)]) -> Result<SrSummary> {
    let n = per_fold.len().max(1) as f64;
    let mut mean = SrSummary::default();
    let mut w = csv::Writer::from_path(root.join("sr_by_fold.csv"))?;
    let names: Vec<String> = SrSummary::default().rows().into_iter().map(|r| r.0).collect();
    let mut header = vec!["fold".to_string()];
    header.extend(names);
    w.write_record(&header)?;
    for (fold, s) in per_fold {
        let mut rec = vec![fold.to_string()];
        rec.extend(s.rows().iter().map(|r| r.1.to_string()));
        w.write_record(&rec)?;
        mean.psnr += s.psnr / n;
        mean.ssim += s.ssim / n;
        mean.consistency += s.consistency / n;
        mean.bicubic_psnr += s.bicubic_psnr / n;
        mean.bicubic_ssim += s.bicubic_ssim / n;
        mean.bicubic_consistency += s.bicubic_consistency / n;
        mean.n += s.n;
    }
    w.flush()?;
    write_metrics_csv(&root.join(SR_SUMMARY_FILE), &mean.rows())?;
    Ok(mean)
}

fn super_resolve_into(cfg: &RunConfig, data: &RunData, root: &Path, overwrite: bool) -> Result<SrSummary> {
    let folds = cfg.fold_list();
    for &fold in &folds {
        let dir = fold_dir(root, fold);
        for name in [SR_IMAGE_DIR, SR_METRICS_FILE, SR_SUMMARY_FILE] {
            claim(&dir.join(name), overwrite)?;
        }
    }
    claim(&root.join(SR_SUMMARY_FILE), overwrite)?;
    let mut per_fold = Vec::new();
    for fold in folds {
        let dir = fold_dir(root, fold);
        let ckpt = SrCheckpoint::load(&dir.join(SR_CHECKPOINT_DIR))?;
        per_fold.push((fold, super_resolve_fold(cfg, data, fold, &ckpt, &dir)?));
    }
    write_sr_table(root, &per_fold)
}

/// Super-resolve each selected fold with its trained checkpoint.
pub fn cmd_super_resolve(cfg: &RunConfig, opts: &CommandOptions) -> Result<SrSummary> {
    require_diffusion(cfg)?;
    let root = begin(cfg, opts)?;
    let data = load_data(cfg)?;
    let summary = super_resolve_into(cfg, &data, &root, opts.overwrite)?;
    finish(&root)?;
    Ok(summary)
}

pub fn cmd_cibm_weights(cfg: &RunConfig, opts: &CommandOptions) -> Result<()> {
    let root = begin(cfg, opts)?;
    let data = load_data(cfg)?;
    let folds = cfg.fold_list();
    for &fold in &folds {
        let dir = fold_dir(&root, fold);
        claim(&dir.join(WEIGHTS_FILE), opts.overwrite)?;
        claim(&dir.join(SPREAD_DIR), opts.overwrite)?;
    }
    for fold in folds {
        let dir = fold_dir(&root, fold);
        let inputs = classifier_inputs(cfg.sr.method, &data, &dir)?;
        let (train, _) = data.splits.train_test(&data.hr, fold);
        cibm_weights_fold(cfg, &inputs.subset(&train), &dir)?;
    }
    finish(&root)
}

pub fn cmd_train_cls(cfg: &RunConfig, opts: &CommandOptions) -> Result<()> {
    let root = begin(cfg, opts)?;
    let data = load_data(cfg)?;
    let folds = cfg.fold_list();
    for &fold in &folds {
        claim(&fold_dir(&root, fold).join(CLASSIFIER_DIR), opts.overwrite)?;
    }
    let cache = cache_dir(&root);
    for fold in folds {
        let dir = fold_dir(&root, fold);
        let inputs = classifier_inputs(cfg.sr.method, &data, &dir)?;
        let (train, _) = data.splits.train_test(&data.hr, fold);
        train_cls_fold(cfg, &inputs.subset(&train), &dir, &cache)?;
    }
    finish(&root)
}

/// Evaluate each fold's classifier; writes per-fold reports plus
/// `metrics_by_fold.csv` and `metrics_mean.csv`.
pub fn cmd_eval(cfg: &RunConfig, opts: &CommandOptions) -> Result<(Vec<FoldOutcome>, Headline)> {
    let root = begin(cfg, opts)?;
    let data = load_data(cfg)?;
    let folds = cfg.fold_list();
    for &fold in &folds {
        claim(&fold_dir(&root, fold).join(EVAL_DIR), opts.overwrite)?;
    }
    claim(&root.join("metrics_by_fold.csv"), opts.overwrite)?;
    claim(&root.join("metrics_mean.csv"), opts.overwrite)?;
    let mut outcomes = Vec::new();
    for fold in folds {
        let dir = fold_dir(&root, fold);
        let (model, _) = load_fold_classifier(&dir)?;
        let inputs = classifier_inputs(cfg.sr.method, &data, &dir)?;
        let (_, test) = data.splits.train_test(&data.hr, fold);
        let report = eval_fold(&model, &inputs.subset(&test), &dir)?;
        outcomes.push(FoldOutcome { fold, report });
    }
    let mean = write_fold_tables(&root, &outcomes, data.minority_class())?;
    finish(&root)?;
    Ok((outcomes, mean))
}

fn cell_name(sr: SrMethod, cibm: bool, cs: bool) -> String {
    let mut s = sr.name().to_string();
    if cibm {
        s.push_str("+cibm");
    }
    if cs {
        s.push_str("+cs");
    }
    s
}

/// The `{SR} x {CIBM} x {CS}` matrix with shared seeds. Diffusion SR is
/// trained once per fold and shared by its cells.
pub fn cmd_ablate(cfg: &RunConfig, opts: &CommandOptions) -> Result<Vec<AblationRow>> {
    let root = begin(cfg, opts)?;
    let abl = root.join("ablation");
    claim(&abl, opts.overwrite)?;
    std::fs::create_dir_all(&abl)?;
    let data = load_data(cfg)?;
    let minority = data.minority_class();
    let sr_root = abl.join("sr_diffusion");
    let mut rows = Vec::new();
    for &sr in &cfg.ablate.sr_methods {
        if sr == SrMethod::Diffusion {
            let sr_cfg = cfg.ablation_cell(SrMethod::Diffusion, false, false);
            for fold in cfg.fold_list() {
                train_sr_fold(&sr_cfg, &data, fold, &fold_dir(&sr_root, fold))?;
            }
            super_resolve_into(&sr_cfg, &data, &sr_root, false)?;
        }
        for cibm in [false, true] {
            for cs in [false, true] {
                let mut cell = cfg.ablation_cell(sr, cibm, cs);
                let name = cell_name(sr, cibm, cs);
                let dir = abl.join(&name);
                cell.out = dir.clone();
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(CONFIG_ECHO), cell.to_toml())?;
                log::info!("ablation cell {name}");
                let outcomes = classify_folds(&cell, &data, &dir, &sr_root)?;
                let metrics = write_fold_tables(&dir, &outcomes, minority)?;
                rows.push(AblationRow {
                    name,
                    sr: sr.name().into(),
                    cibm,
                    cs,
                    metrics,
                });
            }
        }
    }
    write_ablation(&abl, &rows, &data.class_names()[minority])?;
    finish(&root)?;
    Ok(rows)
}

/// `report.md` plus fresh per-class charts from whatever the other
/// commands produced.
pub fn cmd_report(cfg: &RunConfig, opts: &CommandOptions) -> Result<PathBuf> {
    let root = begin(cfg, opts)?;
    let path = root.join("report.md");
    claim(&path, opts.overwrite)?;
    let plots = root.join("plots");
    claim(&plots, opts.overwrite)?;
    let mut made = 0;
    for fold in 0..cfg.data.folds {
        let eval = fold_dir(&root, fold).join(EVAL_DIR);
        if eval.join("confusion_matrix.csv").exists() {
            let (_, cm) = crate::metrics::read_confusion_csv(&eval.join("confusion_matrix.csv"))?;
            let report = confusion_only_report(cm);
            std::fs::create_dir_all(&plots)?;
            per_class_plot(&plots.join(format!("fold_{fold}_per_class.png")), &report)?;
            made += 1;
        }
    }
    let mut text = render_report(&root)?;
    if made == 0 && !root.join("ablation").exists() && !root.join(SR_SUMMARY_FILE).exists() {
        return Err(Error::MissingData(format!(
            "nothing to report under {}; run eval, super-resolve or ablate first",
            root.display()
        )));
    }
    if root.join("metrics_mean.csv").exists() {
        let mean = read_metrics_csv(&root.join("metrics_mean.csv"))?;
        text.push_str(&format!(
            "Mean over folds: {}\n",
            mean.iter()
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    std::fs::write(&path, text)?;
    finish(&root)?;
    Ok(path)
}

fn confusion_only_report(cm: crate::metrics::ConfusionMatrix) -> EvaluationReport {
    let scores = crate::metrics::precision_recall_f1(&cm);
    EvaluationReport {
        top1: cm.accuracy(),
        top5: f64::NAN,
        top5_depth: 0,
        n1: cm.trace() as usize,
        n5: 0,
        nt: cm.total() as usize,
        scores,
        confusion: cm,
    }
}
