//! Conditional U-Net noise predictor.
//!
//! The conditioning image is concatenated with `y_t` on the channel axis.
//! The noise level enters through a sinusoidal embedding of `gamma`, an MLP,
//! and a per-block projection added to the hidden feature maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::process::{Denoiser, TrainableDenoiser};
use crate::nn::{
    concat_channels, norm_groups, split_channels, Activation, AvgPool2, Conv2d, GroupNorm, Layer, Linear, Module,
    ParamVisitor, Tensor, Upsample2,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_channels: usize,
    /// Width of the full-resolution level; the two coarser levels use twice
    /// this.
    pub base_width: usize,
    pub embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_width: 32,
            embed_dim: 64,
        }
    }
}

/// Sinusoidal features of the log signal-to-noise ratio
/// `ln(gamma / (1 - gamma))`. Adjacent steps of a schedule differ by a
/// roughly constant amount in this coordinate, down to the noisiest end.
pub fn noise_level_embedding(gamma: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[gamma.len(), dim]);
    for (i, &g) in gamma.iter().enumerate() {
        let g = (g as f64).clamp(1e-12, 1.0 - 1e-12);
        let v = (g / (1.0 - g)).ln();
        let row = out.sample_mut(i);
        for k in 0..half {
            let freq = (-(100f64.ln()) * k as f64 / half as f64).exp();
            row[k] = (v * freq).sin() as f32;
            row[half + k] = (v * freq).cos() as f32;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    act1: Activation,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    act2: Activation,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, embed: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(norm_groups(cin), cin),
            act1: Activation::silu(),
            conv1: Conv2d::same(cin, cout, 3, rng),
            emb: Linear::new(embed, cout, rng),
            norm2: GroupNorm::new(norm_groups(cout), cout),
            act2: Activation::silu(),
            conv2: Conv2d::same(cout, cout, 3, rng).zero_init(),
            skip: (cin != cout).then(|| Conv2d::same(cin, cout, 1, rng)),
        }
    }

    fn add_embedding(h: &mut Tensor, e: &Tensor) {
        let (n, c, hh, ww) = h.dims4();
        let hw = hh * ww;
        for i in 0..n {
            let erow = e.sample(i).to_vec();
            let hs = h.sample_mut(i);
            for ch in 0..c {
                hs[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += erow[ch]);
            }
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let mut h = self.conv1.forward(&self.act1.forward(&self.norm1.forward(x)));
        Self::add_embedding(&mut h, &self.emb.forward(emb));
        let h = self.conv2.forward(&self.act2.forward(&self.norm2.forward(&h)));
        match &self.skip {
            Some(s) => h.add(&s.forward(x)),
            None => h.add(x),
        }
    }

    fn forward_train(&mut self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.norm1.forward_train(x);
        let h = self.act1.forward_train(&h);
        let mut h = self.conv1.forward_train(&h);
        let e = self.emb.forward_train(emb);
        Self::add_embedding(&mut h, &e);
        let h = self.norm2.forward_train(&h);
        let h = self.act2.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        match &mut self.skip {
            Some(s) => h.add(&s.forward_train(x)),
            None => h.add(x),
        }
    }

    fn backward(&mut self, g: &Tensor) -> (Tensor, Tensor) {
        let gskip = match &mut self.skip {
            Some(s) => s.backward(g),
            None => g.clone(),
        };
        let gh = self.conv2.backward(g);
        let gh = self.act2.backward(&gh);
        let gh = self.norm2.backward(&gh);
        let (n, c, hh, ww) = gh.dims4();
        let hw = hh * ww;
        let mut ge = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let src = gh.sample(i);
            for (ch, dst) in ge.sample_mut(i).iter_mut().enumerate() {
                *dst = src[ch * hw..(ch + 1) * hw].iter().sum();
            }
        }
        let gemb = self.emb.backward(&ge);
        let gh = self.conv1.backward(&gh);
        let gh = self.act1.backward(&gh);
        let mut gx = self.norm1.backward(&gh);
        gx.add_assign(&gskip);
        (gx, gemb)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.emb.visit_params(&format!("{prefix}.emb"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params(&format!("{prefix}.skip"), f);
        }
    }
}

/// Three resolution levels with skip connections between matching levels.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    emb_fc1: Linear,
    emb_act1: Activation,
    emb_fc2: Linear,
    emb_act2: Activation,
    conv_in: Conv2d,
    down0: ResBlock,
    pool0: AvgPool2,
    down1: ResBlock,
    pool1: AvgPool2,
    mid: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    act_out: Activation,
    conv_out: Conv2d,
    schedule_hash: Option<u64>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Self {
        let c0 = config.base_width;
        let c1 = 2 * c0;
        let e = config.embed_dim;
        let ic = config.image_channels;
        Self {
            config,
            emb_fc1: Linear::new(e, e, rng),
            emb_act1: Activation::silu(),
            emb_fc2: Linear::new(e, e, rng),
            emb_act2: Activation::silu(),
            conv_in: Conv2d::same(2 * ic, c0, 3, rng),
            down0: ResBlock::new(c0, c0, e, rng),
            pool0: AvgPool2::default(),
            down1: ResBlock::new(c0, c1, e, rng),
            pool1: AvgPool2::default(),
            mid: ResBlock::new(c1, c1, e, rng),
            up1: ResBlock::new(2 * c1, c1, e, rng),
            up0: ResBlock::new(c1 + c0, c0, e, rng),
            norm_out: GroupNorm::new(norm_groups(c0), c0),
            act_out: Activation::silu(),
            conv_out: Conv2d::same(c0, ic, 3, rng).zero_init(),
            schedule_hash: None,
        }
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn set_schedule_hash(&mut self, hash: Option<u64>) {
        self.schedule_hash = hash;
    }

    fn check_input(&self, x: &Tensor, y: &Tensor, gamma: &[f32]) {
        assert_eq!(x.shape(), y.shape(), "conditioning and noisy image differ in shape");
        assert_eq!(gamma.len(), x.batch(), "one gamma per sample");
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.config.image_channels);
        assert!(h % 4 == 0 && w % 4 == 0, "U-Net needs sides divisible by 4");
    }
}

impl Denoiser for UNet {
    fn predict_noise(&self, x: &Tensor, y_t: &Tensor, gamma: &[f32]) -> Tensor {
        self.check_input(x, y_t, gamma);
        let e = noise_level_embedding(gamma, self.config.embed_dim);
        let e = self.emb_act2.forward(&self.emb_fc2.forward(&self.emb_act1.forward(&self.emb_fc1.forward(&e))));
        let h = self.conv_in.forward(&concat_channels(x, y_t));
        let s0 = self.down0.forward(&h, &e);
        let s1 = self.down1.forward(&self.pool0.forward(&s0), &e);
        let m = self.mid.forward(&self.pool1.forward(&s1), &e);
        let u1 = self.up1.forward(&concat_channels(&Upsample2.forward(&m), &s1), &e);
        let u0 = self.up0.forward(&concat_channels(&Upsample2.forward(&u1), &s0), &e);
        self.conv_out.forward(&self.act_out.forward(&self.norm_out.forward(&u0)))
    }

    fn schedule_hash(&self) -> Option<u64> {
        self.schedule_hash
    }
}

impl TrainableDenoiser for UNet {
    fn forward_train(&mut self, x: &Tensor, y_t: &Tensor, gamma: &[f32]) -> Tensor {
        self.check_input(x, y_t, gamma);
        let e = noise_level_embedding(gamma, self.config.embed_dim);
        let e = self.emb_fc1.forward_train(&e);
        let e = self.emb_act1.forward_train(&e);
        let e = self.emb_fc2.forward_train(&e);
        let e = self.emb_act2.forward_train(&e);
        let h = self.conv_in.forward_train(&concat_channels(x, y_t));
        let s0 = self.down0.forward_train(&h, &e);
        let p0 = self.pool0.forward_train(&s0);
        let s1 = self.down1.forward_train(&p0, &e);
        let p1 = self.pool1.forward_train(&s1);
        let m = self.mid.forward_train(&p1, &e);
        let u1 = self.up1.forward_train(&concat_channels(&Upsample2.forward(&m), &s1), &e);
        let u0 = self.up0.forward_train(&concat_channels(&Upsample2.forward(&u1), &s0), &e);
        let o = self.norm_out.forward_train(&u0);
        let o = self.act_out.forward_train(&o);
        self.conv_out.forward_train(&o)
    }

    fn backward(&mut self, grad: &Tensor) {
        let c0 = self.config.base_width;
        let c1 = 2 * c0;
        let g = self.conv_out.backward(grad);
        let g = self.act_out.backward(&g);
        let g = self.norm_out.backward(&g);
        let (g, ge4) = self.up0.backward(&g);
        let (g_u1, g_s0_skip) = split_channels(&g, c1);
        let g_u1 = Upsample2.backward(&g_u1);
        let (g, ge3) = self.up1.backward(&g_u1);
        let (g_m, g_s1_skip) = split_channels(&g, c1);
        let g_m = Upsample2.backward(&g_m);
        let (g, ge2) = self.mid.backward(&g_m);
        let mut g_s1 = self.pool1.backward(&g);
        g_s1.add_assign(&g_s1_skip);
        let (g, ge1) = self.down1.backward(&g_s1);
        let mut g_s0 = self.pool0.backward(&g);
        g_s0.add_assign(&g_s0_skip);
        let (g, ge0) = self.down0.backward(&g_s0);
        self.conv_in.backward(&g);
        let mut ge = ge0;
        for other in [ge1, ge2, ge3, ge4] {
            ge.add_assign(&other);
        }
        let ge = self.emb_act2.backward(&ge);
        let ge = self.emb_fc2.backward(&ge);
        let ge = self.emb_act1.backward(&ge);
        self.emb_fc1.backward(&ge);
    }
}

impl Module for UNet {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.emb_fc1.visit_params("emb_fc1", f);
        self.emb_fc2.visit_params("emb_fc2", f);
        self.conv_in.visit_params("conv_in", f);
        self.down0.visit("down0", f);
        self.down1.visit("down1", f);
        self.mid.visit("mid", f);
        self.up1.visit("up1", f);
        self.up0.visit("up0", f);
        self.norm_out.visit_params("norm_out", f);
        self.conv_out.visit_params("conv_out", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::process::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (UNet, Tensor, Tensor, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UNetConfig {
            image_channels: 1,
            base_width: 4,
            embed_dim: 8,
        };
        let mut net = UNet::new(cfg, &mut rng);
        // Zero-initialised outputs would hide most of the gradient paths.
        net.visit_params(&mut |name, p| {
            if name.contains("conv2.weight") || name.contains("conv_out.weight") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        });
        let x = standard_normal(&[2, 1, 4, 4], &mut rng);
        let y = standard_normal(&[2, 1, 4, 4], &mut rng);
        (net, x, y, vec![0.3, 0.8])
    }

    #[test]
    fn output_shape_and_determinism() {
        let (net, x, y, g) = small();
        let a = net.predict_noise(&x, &y, &g);
        assert_eq!(a.shape(), y.shape());
        assert_eq!(a, net.predict_noise(&x, &y, &g));
    }

    #[test]
    fn train_forward_matches_inference_forward() {
        let (mut net, x, y, g) = small();
        let a = net.predict_noise(&x, &y, &g);
        let b = net.forward_train(&x, &y, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mut net, x, y, g) = small();
        let probe = standard_normal(&[2, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(9));
        let objective = |n: &UNet| -> f64 {
            n.predict_noise(&x, &y, &g)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        net.zero_grad();
        net.forward_train(&x, &y, &g);
        net.backward(&probe);
        let mut grads = Vec::new();
        net.visit_params(&mut |name, p| grads.push((name.to_string(), p.grad.clone())));
        let h = 1e-2f32;
        let mut checked = 0;
        for (name, grad) in &grads {
            for i in (0..grad.len()).step_by((grad.len() / 3).max(1)) {
                let set = |net: &mut UNet, delta: f32| {
                    net.visit_params(&mut |n, p| {
                        if n == name {
                            p.value.data_mut()[i] += delta;
                        }
                    })
                };
                set(&mut net, h);
                let fp = objective(&net);
                set(&mut net, -2.0 * h);
                let fm = objective(&net);
                set(&mut net, h);
                let num = ((fp - fm) / (2.0 * h as f64)) as f32;
                let ana = grad[i];
                assert!(
                    (num - ana).abs() <= 5e-2 * (1.0 + num.abs().max(ana.abs())),
                    "{name}[{i}]: numeric {num} analytic {ana}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
