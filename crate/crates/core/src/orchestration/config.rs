//! The run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cibm::{SpreadNorm, TeacherConfig};
use crate::classifier::{SamplerKind, TrainConfig};
use crate::data::SynthConfig;
use crate::diffusion::{linear_schedule, NoiseSchedule, NormExponent, SrTrainOptions, UNetConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate tiles in memory from `data.synth`.
    #[default]
    Synthetic,
    /// HR PNGs under `<root>/hr` listed by `<root>/manifest.csv`.
    Archive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: PathBuf,
    /// Archive only; synthetic data takes both from `synth`.
    pub gsd_meters: f64,
    pub scale_factor: usize,
    pub folds: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: PathBuf::new(),
            gsd_meters: 0.3,
            scale_factor: 4,
            folds: 5,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn factor(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.synth.scale_factor,
            DataSource::Archive => self.scale_factor,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrMethod {
    Bicubic,
    #[default]
    Diffusion,
}

impl SrMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bicubic => "bicubic",
            Self::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrScope {
    /// Only the held-out fold.
    Test,
    /// Every tile of the fold, as the classifier needs.
    #[default]
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    pub method: SrMethod,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub ema_decay: f32,
    /// Exponent of the denoising objective, 1 or 2.
    pub norm: u32,
    pub deviation_correction: bool,
    pub scope: SrScope,
    pub inference_batch: usize,
    pub unet: UNetConfig,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            method: SrMethod::Diffusion,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 4000,
            batch_size: 16,
            lr: 5e-4,
            warmup_steps: 100,
            grad_clip: 1.0,
            ema_decay: 0.995,
            norm: 2,
            deviation_correction: false,
            scope: SrScope::All,
            inference_batch: 16,
            unet: UNetConfig {
                base_width: 16,
                ..UNetConfig::default()
            },
        }
    }
}

impl SrConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn train_options(&self, seed: u64) -> Result<SrTrainOptions> {
        Ok(SrTrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            ema_decay: self.ema_decay,
            norm: NormExponent::from_int(self.norm)?,
            seed,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CibmConfig {
    pub spread_norm: SpreadNorm,
    pub teacher: TeacherConfig,
    pub spread_bins: Option<usize>,
}

impl CibmConfig {
    pub fn bins(&self) -> usize {
        self.spread_bins.unwrap_or(20)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Folds to run; empty means all of them.
    pub folds: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub sr_methods: Vec<SrMethod>,
    /// Alpha used when distillation is switched on.
    pub alpha: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            sr_methods: vec![SrMethod::Bicubic, SrMethod::Diffusion],
            alpha: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub sr: SrConfig,
    pub cibm: CibmConfig,
    /// `model.num_classes = 0` takes the class count from the data.
    pub classifier: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            sr: SrConfig::default(),
            cibm: CibmConfig::default(),
            classifier: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::ConfigParse {
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Folds selected for this run.
    pub fn fold_list(&self) -> Vec<usize> {
        if self.eval.folds.is_empty() {
            (0..self.data.folds).collect()
        } else {
            self.eval.folds.clone()
        }
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.data.folds < 2 {
            return Err(Error::InvalidFoldCount {
                k: self.data.folds,
                reason: "need at least 2 folds".into(),
            });
        }
        if let Some(&f) = self.eval.folds.iter().find(|&&f| f >= self.data.folds) {
            return Err(Error::InvalidConfig(format!(
                "eval fold {f} outside 0..{}",
                self.data.folds
            )));
        }
        if self.data.factor() == 0 {
            return Err(Error::InvalidFactor(0));
        }
        if self.data.source == DataSource::Synthetic {
            self.data.synth.validate()?;
        }
        if self.sr.method == SrMethod::Diffusion {
            self.sr.schedule()?;
            self.sr.train_options(self.seed)?;
            if self.sr.inference_batch == 0 {
                return Err(Error::InvalidConfig("sr.inference_batch must be positive".into()));
            }
        }
        self.classifier.validate()?;
        if self.cibm.teacher.classes != self.classifier.model.teacher_classes {
            return Err(Error::ConfigMismatch(format!(
                "teacher has {} classes but the distillation head has {}",
                self.cibm.teacher.classes, self.classifier.model.teacher_classes
            )));
        }
        if self.ablate.sr_methods.is_empty() {
            return Err(Error::InvalidConfig("ablate.sr_methods is empty".into()));
        }
        Ok(())
    }

    /// Classifier settings with the class count filled in.
    pub fn classifier_for(&self, num_classes: usize) -> Result<TrainConfig> {
        let mut c = self.classifier.clone();
        match c.model.num_classes {
            0 => c.model.num_classes = num_classes,
            n if n != num_classes => {
                return Err(Error::ConfigMismatch(format!(
                    "classifier.model.num_classes = {n} but the data has {num_classes} classes"
                )))
            }
            _ => {}
        }
        c.seed = self.seed;
        Ok(c)
    }

    /// Copy with the two ablation switches applied.
    pub fn ablation_cell(&self, sr: SrMethod, cibm: bool, cs: bool) -> Self {
        let mut c = self.clone();
        c.sr.method = sr;
        c.classifier.sampler = if cibm { SamplerKind::Cibm } else { SamplerKind::Uniform };
        c.classifier.alpha = if cs { self.ablate.alpha } else { 0.0 };
        c
    }
}
