use super::Module;

/// Adam without weight decay. Moment buffers are matched to parameters by
/// visiting order, which is fixed for a given model.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr`, then clear gradients.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_params(&mut |_, p| {
            if moments.len() <= idx {
                moments.push((vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            }
            let (m, v) = &mut moments[idx];
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamVisitor, Tensor};

    struct Quadratic(Param);

    impl Module for Quadratic {
        fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut q = Quadratic(Param::new(Tensor::from_vec(&[2], vec![3.0, -2.0])));
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let w = q.0.value.data().to_vec();
            q.0.grad = w.iter().map(|v| 2.0 * (v - 1.0)).collect();
            opt.step(&mut q, 0.01);
        }
        for v in q.0.value.data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }
}
