use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step diffusion bookkeeping. Steps are 1-based; `gamma(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    sigma2: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// `"T;beta_start;beta_end"` with Rust's shortest round-trip float
    /// formatting.
    pub fn descriptor(&self) -> String {
        format!("{};{};{}", self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.descriptor().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let gamma: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma2 = alpha.iter().map(|a| 1.0 - a).collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        gamma,
        sigma2,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        linear_schedule(p.timesteps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn hash(&self) -> u64 {
        self.params.hash()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidStep {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    /// Cumulative signal retention; `gamma(0) == 1`.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.gamma[self.index(t)?])
    }

    pub fn sigma2(&self, t: usize) -> Result<f64> {
        Ok(self.sigma2[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sigma2s(&self) -> &[f64] {
        &self.sigma2
    }
}

/// Uniform step `t`, then `gamma` uniform on the open interval
/// `(gamma_t, gamma_{t-1})`.
pub fn sample_gamma<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> (usize, f64) {
    let t = rng.random_range(1..=schedule.steps());
    let lo = schedule.gamma[t - 1];
    let hi = if t == 1 { 1.0 } else { schedule.gamma[t - 2] };
    loop {
        let u: f64 = rng.random();
        let g = lo + u * (hi - lo);
        if g > lo && g < hi {
            return (t, g);
        }
    }
}
