//! Input-domain alignment of conditioning images before inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Batches whose channel std falls below this are rejected.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel moments of a set of conditioning images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DomainStats {
    /// Moments over every sample and pixel of an NCHW batch.
    pub fn from_batch(x: &Tensor) -> Result<Self> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        if count == 0.0 {
            return Err(Error::MissingData("empty batch for domain statistics".into()));
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = (0..n).flat_map(|i| x.sample(i)[ch * hw..(ch + 1) * hw].iter());
            let m = values.clone().map(|&v| v as f64).sum::<f64>() / count;
            let var = values.map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    fn check(&self) -> Result<()> {
        for (channel, &std) in self.std.iter().enumerate() {
            if !(std >= STD_FLOOR) {
                return Err(Error::DegenerateStats { channel, std });
            }
        }
        Ok(())
    }
}

/// Per-channel affine moment matching of `x_infer` onto `train`.
pub fn correct_deviation(x_infer: &Tensor, train: &DomainStats) -> Result<Tensor> {
    let (n, c, h, w) = x_infer.dims4();
    if train.mean.len() != c || train.std.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c}-channel batch vs {}-channel statistics",
            train.mean.len()
        )));
    }
    train.check()?;
    let infer = DomainStats::from_batch(x_infer)?;
    infer.check()?;
    let hw = h * w;
    let mut out = x_infer.clone();
    for i in 0..n {
        let s = out.sample_mut(i);
        for ch in 0..c {
            let scale = train.std[ch] / infer.std[ch];
            let (mi, mt) = (infer.mean[ch], train.mean[ch]);
            for v in &mut s[ch * hw..(ch + 1) * hw] {
                *v = ((*v as f64 - mi) * scale + mt) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::process::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64) -> Tensor {
        standard_normal(&[4, 3, 5, 5], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 0.3 * v)
    }

    #[test]
    fn matching_statistics_is_identity() {
        let x = batch(1);
        let stats = DomainStats::from_batch(&x).unwrap();
        let y = correct_deviation(&x, &stats).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_shift_is_removed() {
        let base = batch(2);
        let train = DomainStats::from_batch(&base).unwrap();
        // Shift channel 0 so its mean sits 0.3 above the training mean.
        let mut shifted = base.clone();
        let hw = 25;
        for i in 0..4 {
            shifted.sample_mut(i)[..hw].iter_mut().for_each(|v| *v += 0.3);
        }
        let y = correct_deviation(&shifted, &train).unwrap();
        let after = DomainStats::from_batch(&y).unwrap();
        for ch in 0..3 {
            assert!((after.mean[ch] - train.mean[ch]).abs() < 1e-6);
            assert!((after.std[ch] - train.std[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_batch_is_degenerate() {
        let x = Tensor::from_vec(&[2, 3, 2, 2], vec![0.25; 24]);
        let train = DomainStats::from_batch(&batch(3)).unwrap();
        assert!(matches!(correct_deviation(&x, &train), Err(Error::DegenerateStats { .. })));
    }

    #[test]
    fn correction_is_idempotent() {
        let train = DomainStats::from_batch(&batch(4)).unwrap();
        let x = batch(5).map(|v| 2.0 * v - 0.1);
        let once = correct_deviation(&x, &train).unwrap();
        let twice = correct_deviation(&once, &train).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
