use rand::Rng;

use super::{gemm, Layer, Param, ParamVisitor, Tensor};

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn take_cache(cache: &mut Option<Tensor>, layer: &str) -> Tensor {
    cache
        .take()
        .unwrap_or_else(|| panic!("{layer}: backward called without forward_train"))
}

/// 2-D convolution with square kernels, zero padding and channel groups.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let fan_in = in_channels / groups * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        Self {
            weight: Param::normal(&[out_channels, in_channels / groups, kernel, kernel], std, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            cache: None,
        }
    }

    /// Same-padded stride-1 convolution.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(cin, cout, kernel, 1, kernel / 2, 1, rng)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[f32], c: usize, h: usize, w: usize, ho: usize, wo: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let hw = ho * wo;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[f32], c: usize, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let hw = ho * wo;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let hw = ho * wo;
        let cig = c / self.groups;
        let cog = self.out_channels / self.groups;
        let kk = cig * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0f32; kk * hw] };
        let wt = self.weight.value.data();
        for i in 0..n {
            let xs = x.sample(i);
            let os = out.sample_mut(i);
            for g in 0..self.groups {
                let xg = &xs[g * cig * h * w..(g + 1) * cig * h * w];
                let colref: &[f32] = if self.is_pointwise() {
                    xg
                } else {
                    self.im2col(xg, cig, h, w, ho, wo, &mut col);
                    &col
                };
                let wg = &wt[g * cog * kk..(g + 1) * cog * kk];
                let og = &mut os[g * cog * hw..(g + 1) * cog * hw];
                gemm(cog, kk, hw, wg, kk, 1, colref, hw, 1, 0.0, og, hw);
            }
            for (co, b) in self.bias.value.data().iter().enumerate() {
                os[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, "conv2d");
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w);
        let hw = ho * wo;
        let cig = c / self.groups;
        let cog = self.out_channels / self.groups;
        let kk = cig * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0f32; kk * hw] };
        let mut dcol = if pointwise { Vec::new() } else { vec![0f32; kk * hw] };
        for i in 0..n {
            let xs = x.sample(i);
            let gs = grad.sample(i);
            for g in 0..self.groups {
                let xg = &xs[g * cig * h * w..(g + 1) * cig * h * w];
                let gg = &gs[g * cog * hw..(g + 1) * cog * hw];
                let colref: &[f32] = if pointwise {
                    xg
                } else {
                    self.im2col(xg, cig, h, w, ho, wo, &mut col);
                    &col
                };
                let dwg = &mut self.weight.grad[g * cog * kk..(g + 1) * cog * kk];
                gemm(cog, hw, kk, gg, hw, 1, colref, 1, hw, 1.0, dwg, kk);
                let wg = &self.weight.value.data()[g * cog * kk..(g + 1) * cog * kk];
                let dxs = dx.sample_mut(i);
                let dxg = &mut dxs[g * cig * h * w..(g + 1) * cig * h * w];
                if pointwise {
                    gemm(kk, cog, hw, wg, 1, kk, gg, hw, 1, 0.0, dxg, hw);
                } else {
                    gemm(kk, cog, hw, wg, 1, kk, gg, hw, 1, 0.0, &mut dcol, hw);
                    self.col2im(&dcol, cig, h, w, ho, wo, dxg);
                }
            }
            for co in 0..self.out_channels {
                self.bias.grad[co] += gs[co * hw..(co + 1) * hw].iter().sum::<f32>();
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer on `[N, F]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f32).sqrt();
        Self {
            weight: Param::normal(&[outputs, inputs], std, rng),
            bias: Param::zeros(&[outputs]),
            cache: None,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl Layer for Linear {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, fin) = x.dims2();
        let fout = self.outputs();
        assert_eq!(fin, self.inputs(), "linear input width");
        let mut y = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, x.data(), fin, 1, self.weight.value.data(), 1, fin, 0.0, y.data_mut(), fout);
        for row in y.data_mut().chunks_mut(fout) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, "linear");
        let (n, fin) = x.dims2();
        let fout = self.outputs();
        gemm(fout, n, fin, grad.data(), 1, fout, x.data(), fin, 1, 1.0, &mut self.weight.grad, fin);
        for row in grad.data().chunks(fout) {
            for (g, r) in self.bias.grad.iter_mut().zip(row) {
                *g += r;
            }
        }
        let mut dx = Tensor::zeros(&[n, fin]);
        gemm(n, fout, fin, grad.data(), fout, 1, self.weight.value.data(), fin, 1, 0.0, dx.data_mut(), fin);
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Group normalisation with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    groups: usize,
    eps: f32,
    cache: Option<Tensor>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels into {groups} groups");
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.data_mut().iter_mut().for_each(|v| *v = 1.0);
        Self {
            gamma,
            beta: Param::zeros(&[channels]),
            groups,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Mean and inverse std for each (sample, group).
    fn stats(&self, x: &Tensor) -> Vec<(f32, f32)> {
        let (n, c, h, w) = x.dims4();
        let per = c / self.groups * h * w;
        let mut out = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            for chunk in x.sample(i).chunks(per) {
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
                let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
                out.push((mean as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32));
            }
        }
        out
    }
}

impl Layer for GroupNorm {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let cg = c / self.groups;
        let stats = self.stats(x);
        let mut y = x.clone();
        for i in 0..n {
            let ys = y.sample_mut(i);
            for ch in 0..c {
                let (mean, inv) = stats[i * self.groups + ch / cg];
                let (ga, be) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for v in &mut ys[ch * hw..(ch + 1) * hw] {
                    *v = (*v - mean) * inv * ga + be;
                }
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, "groupnorm");
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let cg = c / self.groups;
        let m = (cg * hw) as f32;
        let stats = self.stats(&x);
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let xs = x.sample(i);
            let gs = grad.sample(i);
            for g in 0..self.groups {
                let (mean, inv) = stats[i * self.groups + g];
                let mut sum_d = 0f64;
                let mut sum_dx = 0f64;
                for ch in g * cg..(g + 1) * cg {
                    let ga = self.gamma.value.data()[ch];
                    let mut dgamma = 0f32;
                    let mut dbeta = 0f32;
                    for j in ch * hw..(ch + 1) * hw {
                        let xhat = (xs[j] - mean) * inv;
                        dgamma += gs[j] * xhat;
                        dbeta += gs[j];
                        let d = gs[j] * ga;
                        sum_d += d as f64;
                        sum_dx += (d * xhat) as f64;
                    }
                    self.gamma.grad[ch] += dgamma;
                    self.beta.grad[ch] += dbeta;
                }
                let (sum_d, sum_dx) = (sum_d as f32, sum_dx as f32);
                let dxs = dx.sample_mut(i);
                for ch in g * cg..(g + 1) * cg {
                    let ga = self.gamma.value.data()[ch];
                    for j in ch * hw..(ch + 1) * hw {
                        let xhat = (xs[j] - mean) * inv;
                        dxs[j] = inv / m * (m * gs[j] * ga - sum_d - xhat * sum_dx);
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Silu,
}

#[derive(Clone, Debug)]
pub struct Activation {
    kind: ActKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn relu() -> Self {
        Self {
            kind: ActKind::Relu,
            cache: None,
        }
    }

    pub fn silu() -> Self {
        Self {
            kind: ActKind::Silu,
            cache: None,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Layer for Activation {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self.kind {
            ActKind::Relu => x.map(|v| v.max(0.0)),
            ActKind::Silu => x.map(|v| v * sigmoid(v)),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take_cache(&mut self.cache, "activation");
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| match self.kind {
                ActKind::Relu => {
                    if v > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
                ActKind::Silu => {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                }
            })
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// 2x2 mean pooling.
#[derive(Clone, Debug, Default)]
pub struct AvgPool2 {
    shape: Option<Vec<usize>>,
}

impl Layer for AvgPool2 {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let a = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                }
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("avgpool: backward without forward_train");
        let (h, w) = (shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(&shape);
        for (src, dst) in grad.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = 0.25 * src[oy * wo + ox];
                    let a = 2 * oy * w + 2 * ox;
                    dst[a] = g;
                    dst[a + 1] = g;
                    dst[a + w] = g;
                    dst[a + w + 1] = g;
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Clone, Debug, Default)]
pub struct Upsample2;

impl Layer for Upsample2 {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, ho, wo) = grad.dims4();
        let (h, w) = (ho / 2, wo / 2);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for (src, dst) in grad.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
                }
            }
        }
        dx
    }
}

/// Spatial mean, `[N, C, H, W] -> [N, C]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = (h * w) as f32;
        let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
        Tensor::from_vec(&[n, c], data)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("global pool: backward without forward_train");
        let hw = shape[2] * shape[3];
        let mut dx = Tensor::zeros(&shape);
        for (g, dst) in grad.data().iter().zip(dx.data_mut().chunks_mut(hw)) {
            dst.fill(g / hw as f32);
        }
        dx
    }
}

/// A chain of layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer + Send + Sync>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<L: Layer + Send + Sync + 'static>(mut self, layer: L) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`, for group normalisation.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap()
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let cut = first * h * w;
    let mut a = Vec::with_capacity(n * cut);
    let mut b = Vec::with_capacity(x.numel() - n * cut);
    for i in 0..n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..cut]);
        b.extend_from_slice(&s[cut..]);
    }
    (
        Tensor::from_vec(&[n, first, h, w], a),
        Tensor::from_vec(&[n, c - first, h, w], b),
    )
}

/// Interleave `groups` channel groups. The inverse is a shuffle with
/// `channels / groups` groups.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(c % groups == 0);
    let per = c / groups;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        let src = x.sample(i);
        let dst = y.sample_mut(i);
        for g in 0..groups {
            for j in 0..per {
                let from = g * per + j;
                let to = j * groups + g;
                dst[to * hw..(to + 1) * hw].copy_from_slice(&src[from * hw..(from + 1) * hw]);
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::Param::normal(shape, 1.0, &mut rng).value
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, 1, &mut rng);
        let x = input(&[1, 2, 5, 5], 2);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        let wt = conv.weight.value.data();
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = conv.bias.value.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += wt[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(4, 6, 3, 1, 1, 2, &mut rng);
        conv.bias.value.data_mut().iter_mut().for_each(|v| *v = 0.1);
        check_layer(&mut conv, &input(&[2, 4, 5, 5], 4), 2e-2);
        let mut strided = Conv2d::new(3, 4, 3, 2, 1, 1, &mut rng);
        check_layer(&mut strided, &input(&[2, 3, 6, 6], 5), 2e-2);
        let mut pointwise = Conv2d::new(3, 5, 1, 1, 0, 1, &mut rng);
        check_layer(&mut pointwise, &input(&[2, 3, 4, 4], 6), 2e-2);
        let mut depthwise = Conv2d::new(4, 4, 3, 1, 1, 4, &mut rng);
        check_layer(&mut depthwise, &input(&[1, 4, 4, 4], 7), 2e-2);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut lin = Linear::new(5, 3, &mut rng);
        check_layer(&mut lin, &input(&[4, 5], 9), 1e-2);
    }

    #[test]
    fn groupnorm_gradients() {
        let mut gn = GroupNorm::new(2, 4);
        gn.gamma.value.data_mut().copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
        check_layer(&mut gn, &input(&[2, 4, 3, 3], 10), 3e-2);
    }

    #[test]
    fn groupnorm_normalises() {
        let gn = GroupNorm::new(1, 2);
        let y = gn.forward(&input(&[1, 2, 4, 4], 11));
        let mean: f32 = y.data().iter().sum::<f32>() / 32.0;
        let var: f32 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 32.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn activation_and_pool_gradients() {
        check_layer(&mut Activation::silu(), &input(&[2, 3, 2, 2], 12), 1e-2);
        check_layer(&mut AvgPool2::default(), &input(&[2, 2, 4, 4], 13), 1e-2);
        check_layer(&mut Upsample2, &input(&[1, 2, 3, 3], 14), 1e-2);
        check_layer(&mut GlobalAvgPool::default(), &input(&[2, 3, 3, 3], 15), 1e-2);
    }

    #[test]
    fn sequential_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut seq = Sequential::new()
            .push(Conv2d::same(2, 4, 3, &mut rng))
            .push(GroupNorm::new(2, 4))
            .push(Activation::silu())
            .push(GlobalAvgPool::default())
            .push(Linear::new(4, 3, &mut rng));
        check_layer(&mut seq, &input(&[2, 2, 4, 4], 17), 3e-2);
    }

    #[test]
    fn shuffle_inverse_and_split_inverse() {
        let x = input(&[2, 6, 2, 2], 18);
        let s = channel_shuffle(&x, 2);
        assert_ne!(s, x);
        assert_eq!(channel_shuffle(&s, 3), x);
        let (a, b) = split_channels(&x, 2);
        assert_eq!(concat_channels(&a, &b), x);
    }
}
