//! A small CPU layer library with hand-written backward passes.
//!
//! Layers cache their inputs in `forward_train` and consume that cache in
//! `backward`, accumulating parameter gradients. `forward` takes `&self` and
//! never touches the cache, so a frozen model can be shared for inference.
//! Everything runs single-threaded and is bit-reproducible.

mod io;
mod layers;
mod optim;
mod tensor;

pub use io::{load_params, save_params};
pub use layers::{
    channel_shuffle, concat_channels, split_channels, Activation, AvgPool2, Conv2d, GlobalAvgPool,
    GroupNorm, Linear, Sequential, Upsample2, norm_groups,
};
pub use optim::Adam;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;

/// A trainable array and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    /// Normal initialisation with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v = z * std;
        }
        Self::new(t)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over named parameters, used by the optimiser and serialisation.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Layer {
    fn forward(&self, x: &Tensor) -> Tensor;
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
}

pub trait Module {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>);

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.numel());
        n
    }
}

/// `c = a · b + beta · c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: usize,
    a_cs: usize,
    b: &[f32],
    b_rs: usize,
    b_cs: usize,
    beta: f32,
    c: &mut [f32],
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * a_rs + (k - 1) * a_cs < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || (k - 1) * b_rs + (n - 1) * b_cs < b.len(), "gemm: b out of bounds");
    assert!((m - 1) * c_rs + n - 1 < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}
