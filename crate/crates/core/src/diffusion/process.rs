//! Forward noising, the denoising objective and iterative refinement.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{sample_gamma, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Module, Tensor};

/// An epsilon-predicting network `F(x, y_t, gamma)`.
pub trait Denoiser {
    /// `x` and `y_t` are NCHW batches of equal shape; `gamma` holds one
    /// noise level per sample.
    fn predict_noise(&self, x: &Tensor, y_t: &Tensor, gamma: &[f32]) -> Tensor;

    /// Hash of the schedule the weights were trained against, if known.
    fn schedule_hash(&self) -> Option<u64> {
        None
    }
}

pub trait TrainableDenoiser: Denoiser + Module {
    fn forward_train(&mut self, x: &Tensor, y_t: &Tensor, gamma: &[f32]) -> Tensor;
    /// Backpropagate the gradient of the loss w.r.t. the predicted noise.
    fn backward(&mut self, grad: &Tensor);
}

/// Exponent `a` of the `|F - eps|^a` objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormExponent {
    #[serde(rename = "1")]
    L1,
    #[default]
    #[serde(rename = "2")]
    L2,
}

impl NormExponent {
    pub fn from_int(a: u32) -> Result<Self> {
        match a {
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            _ => Err(Error::InvalidConfig(format!("norm exponent must be 1 or 2, got {a}"))),
        }
    }

    pub fn as_int(self) -> u32 {
        match self {
            Self::L1 => 1,
            Self::L2 => 2,
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

/// `y_m = sqrt(gamma) y0 + sqrt(1 - gamma) eps`.
pub fn forward_noise(y0: &Tensor, gamma: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    check_same(y0, eps, "forward_noise")?;
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| (a * y as f64 + b * e as f64) as f32)
        .collect();
    Ok(Tensor::from_vec(y0.shape(), data))
}

fn forward_noise_per_sample(y0: &Tensor, gammas: &[f64], eps: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y0.shape());
    for (i, &g) in gammas.iter().enumerate() {
        let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
        for ((o, &y), &e) in out.sample_mut(i).iter_mut().zip(y0.sample(i)).zip(eps.sample(i)) {
            *o = (a * y as f64 + b * e as f64) as f32;
        }
    }
    out
}

/// Mean over elements of `|pred - eps|^a` and its gradient w.r.t. `pred`.
pub fn denoising_loss(pred: &Tensor, eps: &Tensor, norm: NormExponent) -> (f64, Tensor) {
    let n = pred.numel() as f64;
    let mut loss = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            match norm {
                NormExponent::L1 => {
                    loss += d.abs();
                    (d.signum() / n) as f32
                }
                NormExponent::L2 => {
                    loss += d * d;
                    (2.0 * d / n) as f32
                }
            }
        })
        .collect();
    (loss / n, Tensor::from_vec(pred.shape(), grad))
}

/// Inputs for one draw of the objective.
pub struct NoisedBatch {
    pub eps: Tensor,
    pub steps: Vec<usize>,
    pub gammas: Vec<f64>,
    pub noised: Tensor,
}

/// Per sample, draw `(t, gamma)` and then the whole noise tensor.
pub fn draw_noised<R: Rng + ?Sized>(y0: &Tensor, schedule: &NoiseSchedule, rng: &mut R) -> NoisedBatch {
    let (steps, gammas): (Vec<usize>, Vec<f64>) =
        (0..y0.batch()).map(|_| sample_gamma(schedule, rng)).unzip();
    let eps = standard_normal(y0.shape(), rng);
    let noised = forward_noise_per_sample(y0, &gammas, &eps);
    NoisedBatch {
        eps,
        steps,
        gammas,
        noised,
    }
}

fn as_f32(g: &[f64]) -> Vec<f32> {
    g.iter().map(|&v| v as f32).collect()
}

/// Objective value without touching gradients.
pub fn training_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x: &Tensor,
    y0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    norm: NormExponent,
) -> Result<f64> {
    check_same(x, y0, "training_loss")?;
    let batch = draw_noised(y0, schedule, rng);
    let pred = model.predict_noise(x, &batch.noised, &as_f32(&batch.gammas));
    let (loss, _) = denoising_loss(&pred, &batch.eps, norm);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("denoising loss {loss}")));
    }
    Ok(loss)
}

/// One stochastic evaluation of the objective with gradients accumulated
/// into the model. The optimiser step is left to the caller.
pub fn training_step<M: TrainableDenoiser + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x: &Tensor,
    y0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    norm: NormExponent,
) -> Result<f64> {
    check_same(x, y0, "training_step")?;
    let batch = draw_noised(y0, schedule, rng);
    let pred = model.forward_train(x, &batch.noised, &as_f32(&batch.gammas));
    let (loss, grad) = denoising_loss(&pred, &batch.eps, norm);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("denoising loss {loss}")));
    }
    model.backward(&grad);
    Ok(loss)
}

/// `y0_hat = (y_t - sqrt(1 - gamma_t) F) / sqrt(gamma_t)`.
pub fn estimate_y0<D: Denoiser + ?Sized>(
    x: &Tensor,
    y_t: &Tensor,
    gamma_t: f64,
    model: &D,
) -> Result<Tensor> {
    if !(gamma_t > 0.0 && gamma_t <= 1.0) {
        return Err(Error::InvalidGamma(gamma_t));
    }
    check_same(x, y_t, "estimate_y0")?;
    let eps = model.predict_noise(x, y_t, &vec![gamma_t as f32; y_t.batch()]);
    let (s, r) = (gamma_t.sqrt(), (1.0 - gamma_t).sqrt());
    let data = y_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| ((y as f64 - r * e as f64) / s) as f32)
        .collect();
    Ok(Tensor::from_vec(y_t.shape(), data))
}

/// `mu = (y_t - (1 - alpha_t) / sqrt(1 - gamma_t) F) / sqrt(alpha_t)`.
pub fn posterior_mean<D: Denoiser + ?Sized>(
    x: &Tensor,
    y_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    model: &D,
) -> Result<Tensor> {
    let alpha = schedule.alpha(t)?;
    let gamma = schedule.gamma(t)?;
    check_same(x, y_t, "posterior_mean")?;
    let eps = model.predict_noise(x, y_t, &vec![gamma as f32; y_t.batch()]);
    Ok(posterior_mean_from_noise(y_t, &eps, alpha, gamma))
}

/// The posterior mean for an already predicted noise tensor.
pub fn posterior_mean_from_noise(y_t: &Tensor, eps: &Tensor, alpha: f64, gamma: f64) -> Tensor {
    let coef = (1.0 - alpha) / (1.0 - gamma).sqrt();
    let scale = 1.0 / alpha.sqrt();
    let data = y_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| (scale * (y as f64 - coef * e as f64)) as f32)
        .collect();
    Tensor::from_vec(y_t.shape(), data)
}

/// One reverse step. Sample `i` of the batch draws its noise from
/// `rngs[i]`; no noise is added at `t == 1`.
pub fn refine_step<D: Denoiser + ?Sized, R: Rng>(
    x: &Tensor,
    y_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    model: &D,
    rngs: &mut [R],
) -> Result<Tensor> {
    if rngs.len() != y_t.batch() {
        return Err(Error::LengthMismatch {
            left: rngs.len(),
            right: y_t.batch(),
        });
    }
    let mut mu = posterior_mean(x, y_t, t, schedule, model)?;
    if t > 1 {
        let std = (1.0 - schedule.alpha(t)?).sqrt();
        for (i, rng) in rngs.iter_mut().enumerate() {
            for v in mu.sample_mut(i) {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + std * z) as f32;
            }
        }
    }
    Ok(mu)
}

/// The process runs on the detail the conditioning image lacks,
/// `y0 = hr - x`, so a denoiser that knows nothing yields `x` itself.
pub fn residual_target(x: &Tensor, hr: &Tensor) -> Result<Tensor> {
    check_same(x, hr, "residual_target")?;
    let data = hr.data().iter().zip(x.data()).map(|(h, c)| h - c).collect();
    Ok(Tensor::from_vec(x.shape(), data))
}

/// Full `T`-step refinement from pure noise. The refined residual is added
/// back onto `x` and the result clamped to `[-1, 1]`.
pub fn super_resolve<D: Denoiser + ?Sized, R: Rng>(
    x: &Tensor,
    model: &D,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Tensor> {
    super_resolve_observed(x, model, schedule, rngs, &mut |_| {})
}

/// [`super_resolve`] with a callback invoked before every refinement step.
pub fn super_resolve_observed<D: Denoiser + ?Sized, R: Rng>(
    x: &Tensor,
    model: &D,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
    on_step: &mut dyn FnMut(usize),
) -> Result<Tensor> {
    if let Some(h) = model.schedule_hash() {
        if h != schedule.hash() {
            return Err(Error::ScheduleMismatch {
                checkpoint: h,
                requested: schedule.hash(),
            });
        }
    }
    if rngs.len() != x.batch() {
        return Err(Error::LengthMismatch {
            left: rngs.len(),
            right: x.batch(),
        });
    }
    let mut y = Tensor::zeros(x.shape());
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in y.sample_mut(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    for t in (1..=schedule.steps()).rev() {
        on_step(t);
        y = refine_step(x, &y, t, schedule, model, rngs)?;
    }
    Ok(y.add(x).map(|v| v.clamp(-1.0, 1.0)))
}
