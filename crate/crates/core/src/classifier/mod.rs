//! Dual-head student trained on ground truth plus frozen-teacher targets.

mod loss;
mod model;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use loss::{
    argmax, batch_loss, classification_loss, classification_loss_from_logits, classification_loss_grad,
    combined_loss, contrastive_loss, contrastive_loss_grad, log_sum_exp, soft_contrastive_loss,
    soft_contrastive_loss_grad, softmax, BatchLoss, Target, PROB_FLOOR,
};
pub use model::{BackboneKind, DualHeadClassifier, ModelConfig};

use crate::cibm::{class_frequencies, frequency_weights, CategoryWeightTable, Teacher, WeightedSampler};
use crate::data::{augment_with, AugmentPolicy, LabeledDataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{load_params, save_params, Adam, Tensor};
use crate::seed::derived_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Every training sample equally likely.
    Uniform,
    /// Classes drawn by normalised inverse frequency.
    Frequency,
    /// Classes drawn by the category weight table.
    #[default]
    Cibm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    /// Draws per epoch; 0 means one pass worth of the training set.
    pub epoch_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub sampler: SamplerKind,
    /// Distil the teacher's full distribution instead of its argmax.
    pub soft_targets: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            epochs: 50,
            lr_start: 1.5e-2,
            lr_end: 1e-5,
            batch_size: 64,
            epoch_size: 0,
            seed: 0,
            augment: AugmentPolicy {
                hflip_prob: 0.5,
                crop: Some(28),
            },
            sampler: SamplerKind::Cibm,
            soft_targets: false,
            model: ModelConfig::default(),
        }
    }
}

/// Fractions of the run after which the learning rate drops tenfold.
pub const LR_MILESTONES: [f64; 3] = [0.4, 0.7, 0.9];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        combined_loss(0.0, 0.0, self.alpha)?;
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Step-down schedule for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = LR_MILESTONES
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).ceil() as usize)
            .count();
        (self.lr_start * 0.1f64.powi(drops as i32)).max(self.lr_end)
    }
}

/// Teacher output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    pub sample_id: String,
    pub c: usize,
    pub soft: Option<Vec<f64>>,
}

/// Argmax of the teacher's logits per tile, ties to the lowest index.
pub fn teacher_targets(ds: &LabeledDataset, teacher: &Teacher, soft: bool) -> Result<Vec<TeacherTarget>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.tiles.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|t| &t.pixels).collect();
        let logits = teacher.logits(&imgs)?;
        for (i, tile) in chunk.iter().enumerate() {
            let z: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
            out.push(TeacherTarget {
                sample_id: tile.sample_id.clone(),
                c: argmax(&z),
                soft: soft.then(|| softmax(&z)),
            });
        }
    }
    Ok(out)
}

/// Cache file stem for `(teacher, dataset)`.
pub fn target_cache_stem(ds: &LabeledDataset, teacher: &Teacher) -> String {
    format!("{}-{}", teacher.id(), &ds.content_hash()[..16])
}

/// [`teacher_targets`] backed by `sample_id,c` CSV files (plus a
/// safetensors file of soft targets when requested) under `cache_dir`.
pub fn teacher_targets_cached(
    ds: &LabeledDataset,
    teacher: &Teacher,
    soft: bool,
    cache_dir: &Path,
) -> Result<Vec<TeacherTarget>> {
    let stem = target_cache_stem(ds, teacher);
    let csv_path = cache_dir.join(format!("{stem}.csv"));
    let soft_path = cache_dir.join(format!("{stem}.soft.safetensors"));
    if csv_path.exists() && (!soft || soft_path.exists()) {
        if let Ok(t) = read_targets(&csv_path, soft.then_some(soft_path.as_path())) {
            if t.len() == ds.len() {
                log::info!("teacher targets from cache {}", csv_path.display());
                return Ok(t);
            }
        }
    }
    let targets = teacher_targets(ds, teacher, soft)?;
    std::fs::create_dir_all(cache_dir)?;
    write_targets(&csv_path, soft.then_some(soft_path.as_path()), &targets)?;
    Ok(targets)
}

pub fn write_targets(csv_path: &Path, soft_path: Option<&Path>, targets: &[TeacherTarget]) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["sample_id", "c"])?;
    for t in targets {
        w.write_record([t.sample_id.as_str(), &t.c.to_string()])?;
    }
    w.flush()?;
    if let Some(path) = soft_path {
        let width = targets.first().and_then(|t| t.soft.as_ref()).map_or(0, Vec::len);
        let mut bytes = Vec::with_capacity(targets.len() * width * 8);
        for t in targets {
            let s = t
                .soft
                .as_ref()
                .ok_or_else(|| Error::Checkpoint(format!("{} has no soft target", t.sample_id)))?;
            bytes.extend(s.iter().flat_map(|v| v.to_le_bytes()));
        }
        let view = safetensors::tensor::TensorView::new(
            safetensors::tensor::Dtype::F64,
            vec![targets.len(), width],
            &bytes,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let out = safetensors::serialize([("soft", view)], None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, out)?;
    }
    Ok(())
}

pub fn read_targets(csv_path: &Path, soft_path: Option<&Path>) -> Result<Vec<TeacherTarget>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        c: usize,
    }
    let mut targets: Vec<TeacherTarget> = csv::Reader::from_path(csv_path)?
        .deserialize::<Row>()
        .map(|r| {
            r.map(|r| TeacherTarget {
                sample_id: r.sample_id,
                c: r.c,
                soft: None,
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    if let Some(path) = soft_path {
        let bytes = std::fs::read(path)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let view = st.tensor("soft").map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shape = view.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Checkpoint(format!("soft targets have shape {shape:?}")));
        }
        let vals: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        for (t, row) in targets.iter_mut().zip(vals.chunks(shape[1])) {
            t.soft = Some(row.to_vec());
        }
    }
    Ok(targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_con: f64,
    pub l_cls: f64,
    pub train_top1: f64,
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainedClassifier {
    pub model: DualHeadClassifier,
    pub log: Vec<EpochLog>,
    /// Per epoch, how often each class was drawn.
    pub class_draws: Vec<Vec<usize>>,
}

/// Class weights the sampler uses for `kind`.
pub fn sampler_weights(kind: SamplerKind, counts: &[usize], table: &CategoryWeightTable) -> Result<Vec<f64>> {
    match kind {
        SamplerKind::Uniform => class_frequencies(counts),
        SamplerKind::Frequency => frequency_weights(counts),
        SamplerKind::Cibm => Ok(table.w.clone()),
    }
}

/// Train a student on `data`. The tiles must already be in their final
/// pre-augmentation form (upscaled or super-resolved). `targets[i]`
/// belongs to `data.tiles[i]`.
pub fn train_classifier(
    config: &TrainConfig,
    data: &LabeledDataset,
    weights: &CategoryWeightTable,
    targets: &[TeacherTarget],
) -> Result<TrainedClassifier> {
    train_classifier_observed(config, data, weights, targets, &mut |_| {})
}

pub fn train_classifier_observed(
    config: &TrainConfig,
    data: &LabeledDataset,
    weights: &CategoryWeightTable,
    targets: &[TeacherTarget],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedClassifier> {
    config.validate()?;
    let k = data.num_classes();
    if config.model.num_classes != k {
        return Err(Error::ConfigMismatch(format!(
            "model has {} classes, dataset has {k}",
            config.model.num_classes
        )));
    }
    if weights.num_classes() != k {
        return Err(Error::ConfigMismatch(format!(
            "weight table has {} classes, dataset has {k}",
            weights.num_classes()
        )));
    }
    if targets.len() != data.len()
        || targets.iter().zip(&data.tiles).any(|(t, d)| t.sample_id != d.sample_id)
    {
        return Err(Error::ConfigMismatch("teacher targets do not line up with the training tiles".into()));
    }
    let ct = config.model.teacher_classes;
    if let Some(t) = targets.iter().find(|t| t.c >= ct || t.soft.as_ref().is_some_and(|s| s.len() != ct)) {
        return Err(Error::ConfigMismatch(format!(
            "teacher target for {} does not fit {ct} distillation logits",
            t.sample_id
        )));
    }
    if config.soft_targets && targets.iter().any(|t| t.soft.is_none()) {
        return Err(Error::ConfigMismatch("soft targets requested but not provided".into()));
    }
    if let Some(crop) = config.augment.crop {
        if crop != config.model.input_size {
            return Err(Error::ConfigMismatch(format!(
                "augmentation crop {crop} differs from model input {}",
                config.model.input_size
            )));
        }
    }

    let counts = data.class_counts();
    let w = sampler_weights(config.sampler, &counts, weights)?;
    let mut sampler = WeightedSampler::new(&w, data.indices_by_class(), derived_rng(config.seed, "sampler"))?;
    let mut aug_rng = derived_rng(config.seed, "augment");
    let mut model = DualHeadClassifier::new(config.model.clone(), &mut derived_rng(config.seed, "init"));
    let mut opt = Adam::new();
    let epoch_size = if config.epoch_size == 0 { data.len() } else { config.epoch_size };
    let mut log = Vec::with_capacity(config.epochs);
    let mut class_draws = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let draws: Vec<usize> = sampler.by_ref().take(epoch_size).collect();
        let mut per_class = vec![0; k];
        for &i in &draws {
            per_class[data.tiles[i].class_id] += 1;
        }
        let (mut sum_loss, mut sum_con, mut sum_cls, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for batch in draws.chunks(config.batch_size) {
            let mut imgs = Vec::with_capacity(batch.len());
            for &i in batch {
                imgs.push(augment_with(&data.tiles[i], &config.augment, &mut aug_rng)?.pixels);
            }
            check_input_size(&imgs, config.model.input_size)?;
            let x = Tensor::from_images(&imgs);
            let labels: Vec<usize> = batch.iter().map(|&i| data.tiles[i].class_id).collect();
            let tgt: Vec<Target<'_>> = batch
                .iter()
                .map(|&i| match (&targets[i].soft, config.soft_targets) {
                    (Some(s), true) => Target::Soft(s),
                    _ => Target::Hard(targets[i].c),
                })
                .collect();
            let (task, distill) = model.forward_train(&x);
            let b = batch_loss(&task, &distill, &labels, &tgt, config.alpha).map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("{m} in epoch {}", epoch + 1)),
                e => e,
            })?;
            model.backward(&b.grad_task, &b.grad_distill);
            opt.step(&mut model, lr as f32);
            let n = batch.len() as f64;
            sum_loss += b.loss * n;
            sum_con += b.l_con * n;
            sum_cls += b.l_cls * n;
            correct += b.correct;
        }
        let n = draws.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sum_loss / n,
            l_con: sum_con / n,
            l_cls: sum_cls / n,
            train_top1: correct as f64 / n,
        };
        on_epoch(&entry);
        log.push(entry);
        class_draws.push(per_class);
    }
    Ok(TrainedClassifier {
        model,
        log,
        class_draws,
    })
}

fn check_input_size(imgs: &[Image], size: usize) -> Result<()> {
    for img in imgs {
        let (c, h, w) = img.dims();
        if c != 3 || h != size || w != size {
            return Err(Error::InputSizeMismatch {
                expected: size,
                height: h,
                width: w,
            });
        }
    }
    Ok(())
}

/// Centre crop to the model input when the tile is larger.
pub fn eval_view(img: &Image, input_size: usize) -> Result<Image> {
    if img.height() == input_size && img.width() == input_size {
        Ok(img.clone())
    } else {
        img.center_crop(input_size)
    }
}

/// `(class, probability)` pairs sorted by descending probability.
pub type Ranking = Vec<(usize, f64)>;

fn rank(z: &[f32]) -> Ranking {
    let z: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let mut r: Ranking = softmax(&z).into_iter().enumerate().collect();
    // Stable: equal probabilities keep ascending class order.
    r.sort_by(|a, b| b.1.total_cmp(&a.1));
    r
}

pub fn predict(model: &DualHeadClassifier, img: &Image) -> Result<Ranking> {
    Ok(predict_batch(model, std::slice::from_ref(img))?.remove(0))
}

pub fn predict_batch(model: &DualHeadClassifier, imgs: &[Image]) -> Result<Vec<Ranking>> {
    check_input_size(imgs, model.config().input_size)?;
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(64) {
        let (task, _) = model.forward(&Tensor::from_images(chunk));
        out.extend((0..chunk.len()).map(|i| rank(task.sample(i))));
    }
    Ok(out)
}

pub const CLS_METADATA_FILE: &str = "metadata.json";
pub const CLS_WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save_classifier(dir: &Path, model: &mut DualHeadClassifier, meta: &ClassifierMeta) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CLS_METADATA_FILE), serde_json::to_string_pretty(meta)?)?;
    save_params(model, &dir.join(CLS_WEIGHTS_FILE))?;
    Ok(dir.to_path_buf())
}

pub fn load_classifier(dir: &Path) -> Result<(DualHeadClassifier, ClassifierMeta)> {
    let path = dir.join(CLS_METADATA_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingData(format!("no classifier metadata at {}", path.display())))?;
    let meta: ClassifierMeta = serde_json::from_str(&text)?;
    let mut model = DualHeadClassifier::new(meta.config.model.clone(), &mut derived_rng(0, "load"));
    load_params(&mut model, &dir.join(CLS_WEIGHTS_FILE))?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cibm::{cibm_weights, TeacherConfig};
    use crate::data::{synth_generate, SynthConfig};
    use crate::image::Interpolation;

    fn toy() -> LabeledDataset {
        let cfg = SynthConfig {
            counts: vec![12, 12, 12, 12, 12, 4],
            seed: 5,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        let mut ds = out.lr.clone();
        for t in &mut ds.tiles {
            t.pixels = t.pixels.upscale(4, Interpolation::Bicubic).unwrap();
        }
        ds
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            lr_start: 3e-3,
            lr_end: 1e-5,
            batch_size: 16,
            model: ModelConfig {
                width: 8,
                num_classes: 6,
                teacher_classes: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn teacher() -> Teacher {
        Teacher::new(TeacherConfig {
            classes: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr_start, c.lr_end, c.alpha), (50, 1.5e-2, 1e-5, 0.7));
        assert_eq!(c.lr_at(0), 1.5e-2);
        assert_eq!(c.lr_at(19), 1.5e-2);
        assert!((c.lr_at(20) - 1.5e-3).abs() < 1e-15);
        assert!((c.lr_at(35) - 1.5e-4).abs() < 1e-15);
        assert!((c.lr_at(49) - 1.5e-5).abs() < 1e-15);
        let steep = TrainConfig {
            lr_start: 1e-4,
            ..c
        };
        assert_eq!(steep.lr_at(49), 1e-5);
    }

    #[test]
    fn targets_are_deterministic_and_cached() {
        let ds = toy();
        let t = teacher();
        let a = teacher_targets(&ds, &t, true).unwrap();
        assert!(a.iter().all(|x| x.c < 8));
        for x in &a {
            let s = x.soft.as_ref().unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        let b = teacher_targets_cached(&ds, &t, true, dir.path()).unwrap();
        let stem = target_cache_stem(&ds, &t);
        let first = std::fs::read(dir.path().join(format!("{stem}.csv"))).unwrap();
        let c = teacher_targets_cached(&ds, &t, true, dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        teacher_targets_cached(&ds, &t, true, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(format!("{stem}.csv"))).unwrap());
    }

    #[test]
    fn training_is_reproducible_and_alpha_zero_is_cls_only() {
        let ds = toy();
        let t = teacher();
        let targets = teacher_targets(&ds, &t, false).unwrap();
        let table = cibm_weights(&ds.class_counts(), &[1.0; 6]).unwrap();
        let cfg = small_config();
        let a = train_classifier(&cfg, &ds, &table, &targets).unwrap();
        let b = train_classifier(&cfg, &ds, &table, &targets).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.loss.is_finite()));

        let cls_only = TrainConfig { alpha: 0.0, ..cfg.clone() };
        let r = train_classifier(&cls_only, &ds, &table, &targets).unwrap();
        assert!(r.log.iter().all(|e| e.loss == e.l_cls));
        let con_only = TrainConfig { alpha: 1.0, ..cfg };
        let r = train_classifier(&con_only, &ds, &table, &targets).unwrap();
        assert!(r.log.iter().all(|e| e.loss == e.l_con));
    }

    #[test]
    fn mismatched_classes_are_rejected() {
        let ds = toy();
        let targets = teacher_targets(&ds, &teacher(), false).unwrap();
        let table = cibm_weights(&ds.class_counts(), &[1.0; 6]).unwrap();
        let mut cfg = small_config();
        cfg.model.num_classes = 5;
        assert!(matches!(
            train_classifier(&cfg, &ds, &table, &targets),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn cibm_sampler_follows_the_table() {
        let ds = toy();
        let targets = teacher_targets(&ds, &teacher(), false).unwrap();
        let table = cibm_weights(&ds.class_counts(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            epoch_size: 10_000,
            batch_size: 500,
            model: ModelConfig {
                width: 4,
                backbone: BackboneKind::SimpleCnn,
                ..small_config().model
            },
            ..small_config()
        };
        let r = train_classifier(&cfg, &ds, &table, &targets).unwrap();
        for (c, &n) in r.class_draws[0].iter().enumerate() {
            assert!((n as f64 / 10_000.0 - table.w[c]).abs() < 0.02);
        }
    }

    #[test]
    fn predictions_are_ranked_distributions() {
        let ds = toy();
        let m = DualHeadClassifier::new(small_config().model, &mut derived_rng(1, "m"));
        let imgs: Vec<Image> = ds.tiles[..7].iter().map(|t| eval_view(&t.pixels, 28).unwrap()).collect();
        let batch = predict_batch(&m, &imgs).unwrap();
        let (task, _) = m.forward(&Tensor::from_images(&imgs));
        for (i, r) in batch.iter().enumerate() {
            assert_eq!(r.len(), 6);
            assert!((r.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(r.windows(2).all(|w| w[0].1 >= w[1].1));
            let z: Vec<f64> = task.sample(i).iter().map(|&v| v as f64).collect();
            assert_eq!(r[0].0, argmax(&z));
            let single = predict(&m, &imgs[i]).unwrap();
            for (a, b) in single.iter().zip(r) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-6);
            }
        }
        assert!(matches!(
            predict(&m, &ds.tiles[0].pixels),
            Err(Error::InputSizeMismatch { expected: 28, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let mut m = DualHeadClassifier::new(cfg.model.clone(), &mut derived_rng(2, "m"));
        let meta = ClassifierMeta {
            config: cfg,
            epoch: 3,
            seed: 0,
            class_names: vec!["a".into(); 6],
            metrics: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        save_classifier(dir.path(), &mut m, &meta).unwrap();
        let (back, meta2) = load_classifier(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        let x = Tensor::from_images(&[Image::filled(3, 28, 28, 0.1)]);
        assert_eq!(m.forward(&x).0, back.forward(&x).0);
    }
}
