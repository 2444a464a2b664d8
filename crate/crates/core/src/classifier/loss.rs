//! Ground-truth and distillation losses with their logit gradients.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities below this are raised to it before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    Ok(())
}

/// `log sum exp z` with the maximum subtracted first.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Cross-entropy of logits `z` against index `c`: `-z[c] + log sum exp z`.
pub fn contrastive_loss(z: &[f64], c: usize) -> Result<f64> {
    check_index(c, z.len())?;
    Ok(log_sum_exp(z) - z[c])
}

/// `softmax(z) - onehot(c)`.
pub fn contrastive_loss_grad(z: &[f64], c: usize) -> Result<Vec<f64>> {
    check_index(c, z.len())?;
    let mut g = softmax(z);
    g[c] -= 1.0;
    Ok(g)
}

/// `-log p[label]` with `p` floored at [`PROB_FLOOR`].
pub fn classification_loss(probs: &[f64], label: usize) -> Result<f64> {
    check_index(label, probs.len())?;
    let p = probs[label];
    if !(p > 0.0) {
        return Err(Error::NonPositiveProbability(p));
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

/// [`classification_loss`] of `softmax(z)`, computed in log space.
pub fn classification_loss_from_logits(z: &[f64], label: usize) -> Result<f64> {
    check_index(label, z.len())?;
    Ok((log_sum_exp(z) - z[label]).min(-PROB_FLOOR.ln()))
}

/// Gradient of [`classification_loss_from_logits`]; zero where the floor
/// is active.
pub fn classification_loss_grad(z: &[f64], label: usize) -> Result<Vec<f64>> {
    check_index(label, z.len())?;
    if log_sum_exp(z) - z[label] > -PROB_FLOOR.ln() {
        return Ok(vec![0.0; z.len()]);
    }
    let mut g = softmax(z);
    g[label] -= 1.0;
    Ok(g)
}

/// Cross-entropy against a target distribution, `-sum q log softmax(z)`.
/// Differs from KL(q || softmax z) by the constant entropy of `q`.
pub fn soft_contrastive_loss(z: &[f64], q: &[f64]) -> Result<f64> {
    if z.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: q.len(),
        });
    }
    let lse = log_sum_exp(z);
    Ok(z.iter().zip(q).map(|(v, p)| p * (lse - v)).sum())
}

pub fn soft_contrastive_loss_grad(z: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if z.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: q.len(),
        });
    }
    let total: f64 = q.iter().sum();
    Ok(softmax(z).iter().zip(q).map(|(s, p)| total * s - p).collect())
}

/// `alpha l_con + (1 - alpha) l_cls`.
pub fn combined_loss(l_con: f64, l_cls: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(alpha * l_con + (1.0 - alpha) * l_cls)
}

/// Distillation target for one sample: hard index, optionally with the
/// teacher's distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// Batch means of both losses and the gradient of the combined loss with
/// respect to the task and distillation logits.
pub struct BatchLoss {
    pub loss: f64,
    pub l_con: f64,
    pub l_cls: f64,
    pub grad_task: Tensor,
    pub grad_distill: Tensor,
    /// Samples whose task argmax equals the label.
    pub correct: usize,
}

pub fn batch_loss(
    task: &Tensor,
    distill: &Tensor,
    labels: &[usize],
    targets: &[Target<'_>],
    alpha: f64,
) -> Result<BatchLoss> {
    let (n, k) = task.dims2();
    let (nd, ct) = distill.dims2();
    if n != labels.len() || nd != n || targets.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len().min(targets.len()).min(nd),
        });
    }
    combined_loss(0.0, 0.0, alpha)?;
    let mut grad_task = Tensor::zeros(&[n, k]);
    let mut grad_distill = Tensor::zeros(&[n, ct]);
    let (mut l_con, mut l_cls, mut correct) = (0.0, 0.0, 0);
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let zt: Vec<f64> = task.sample(i).iter().map(|&v| v as f64).collect();
        let zd: Vec<f64> = distill.sample(i).iter().map(|&v| v as f64).collect();
        l_cls += classification_loss_from_logits(&zt, labels[i])?;
        let gc = classification_loss_grad(&zt, labels[i])?;
        let (lc, gd) = match targets[i] {
            Target::Hard(c) => (contrastive_loss(&zd, c)?, contrastive_loss_grad(&zd, c)?),
            Target::Soft(q) => (soft_contrastive_loss(&zd, q)?, soft_contrastive_loss_grad(&zd, q)?),
        };
        l_con += lc;
        for (dst, g) in grad_task.sample_mut(i).iter_mut().zip(gc) {
            *dst = ((1.0 - alpha) * g * inv) as f32;
        }
        for (dst, g) in grad_distill.sample_mut(i).iter_mut().zip(gd) {
            *dst = (alpha * g * inv) as f32;
        }
        if argmax(&zt) == labels[i] {
            correct += 1;
        }
    }
    l_con *= inv;
    l_cls *= inv;
    let loss = combined_loss(l_con, l_cls, alpha)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("classifier loss {loss}")));
    }
    Ok(BatchLoss {
        loss,
        l_con,
        l_cls,
        grad_task,
        grad_distill,
        correct,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
