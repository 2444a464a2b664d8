//! The denoiser training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deviation::DomainStats;
use super::process::{residual_target, training_step, NormExponent};
use super::schedule::NoiseSchedule;
use super::unet::{UNet, UNetConfig};
use super::SrCheckpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Module, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Exponential moving average of weights; 0 disables it.
    pub ema_decay: f32,
    pub norm: NormExponent,
    pub seed: u64,
}

impl Default for SrTrainOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 2e-4,
            warmup_steps: 100,
            grad_clip: 1.0,
            ema_decay: 0.999,
            norm: NormExponent::L2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrLogEntry {
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
}

fn clip_gradients(model: &mut impl Module, max_norm: f32) {
    let mut sq = 0f64;
    model.visit_params(&mut |_, p| sq += p.grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>());
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        model.visit_params(&mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
}

/// Train a fresh U-Net on `(x, y0)` pairs, where `x` is the upscaled
/// low-resolution conditioning image. Returns the checkpoint (EMA weights
/// when enabled) and a per-step loss log.
pub fn train_denoiser(
    pairs: &[(Image, Image)],
    schedule: &NoiseSchedule,
    unet: UNetConfig,
    opts: &SrTrainOptions,
) -> Result<(SrCheckpoint, Vec<SrLogEntry>)> {
    train_denoiser_observed(pairs, schedule, unet, opts, &mut |_| {})
}

pub fn train_denoiser_observed(
    pairs: &[(Image, Image)],
    schedule: &NoiseSchedule,
    unet: UNetConfig,
    opts: &SrTrainOptions,
    on_step: &mut dyn FnMut(&SrLogEntry),
) -> Result<(SrCheckpoint, Vec<SrLogEntry>)> {
    if pairs.is_empty() {
        return Err(Error::MissingData("no training pairs for the denoiser".into()));
    }
    if opts.batch_size == 0 || opts.steps == 0 {
        return Err(Error::InvalidConfig("SR steps and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = UNet::new(unet, &mut rng);
    let mut ema: Vec<Vec<f32>> = Vec::new();
    model.visit_params(&mut |_, p| ema.push(p.value.data().to_vec()));
    let mut opt = Adam::new();
    let mut log = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let x = Tensor::from_images(idx.iter().map(|&i| &pairs[i].0));
        let y0 = residual_target(&x, &Tensor::from_images(idx.iter().map(|&i| &pairs[i].1)))?;
        let loss = training_step(&mut model, &x, &y0, schedule, &mut rng, opts.norm)
            .map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("{m} at SR step {step}")),
                e => e,
            })?;
        if opts.grad_clip > 0.0 {
            clip_gradients(&mut model, opts.grad_clip);
        }
        let lr = if step <= opts.warmup_steps {
            opts.lr * step as f32 / opts.warmup_steps as f32
        } else {
            opts.lr
        };
        opt.step(&mut model, lr);
        if opts.ema_decay > 0.0 {
            // Short runs would otherwise average in the random init.
            let d = opts.ema_decay.min((1 + step) as f32 / (10 + step) as f32);
            let mut i = 0;
            model.visit_params(&mut |_, p| {
                for (e, v) in ema[i].iter_mut().zip(p.value.data()) {
                    *e = d * *e + (1.0 - d) * v;
                }
                i += 1;
            });
        }
        let entry = SrLogEntry { step, lr, loss };
        on_step(&entry);
        log.push(entry);
    }
    if opts.ema_decay > 0.0 {
        let mut i = 0;
        model.visit_params(&mut |_, p| {
            p.value.data_mut().copy_from_slice(&ema[i]);
            i += 1;
        });
    }
    let stats = DomainStats::from_batch(&Tensor::from_images(pairs.iter().map(|p| &p.0)))?;
    Ok((
        SrCheckpoint::new(model, schedule, opts.steps, opts.seed, opts.norm, stats),
        log,
    ))
}
