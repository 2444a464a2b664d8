//! Student network: a shared backbone feeding a task head and a
//! distillation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    channel_shuffle, concat_channels, norm_groups, split_channels, Activation, AvgPool2, Conv2d,
    GlobalAvgPool, GroupNorm, Layer, Linear, Module, ParamVisitor, Sequential, Tensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Channel-split / channel-shuffle units with depthwise convolutions.
    #[default]
    Shuffle,
    /// Plain conv / norm / ReLU / pool stack.
    SimpleCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Stem width; later stages use 2x, 4x and 8x.
    pub width: usize,
    /// Square input side expected by `predict`.
    pub input_size: usize,
    /// 0 until set; run configs fill it in from the data.
    pub num_classes: usize,
    pub teacher_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Shuffle,
            width: 24,
            input_size: 28,
            num_classes: 0,
            teacher_classes: 32,
        }
    }
}

fn norm(c: usize) -> GroupNorm {
    GroupNorm::new(norm_groups(c), c)
}

fn pointwise<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Conv2d {
    Conv2d::new(cin, cout, 1, 1, 0, 1, rng)
}

fn depthwise<R: Rng + ?Sized>(c: usize, stride: usize, rng: &mut R) -> Conv2d {
    Conv2d::new(c, c, 3, stride, 1, c, rng)
}

/// One shuffle unit. With stride 1 half the channels pass through
/// untouched; with stride 2 both halves are convolved and the resolution
/// halves.
struct ShuffleUnit {
    left: Option<Sequential>,
    right: Sequential,
    split: usize,
}

impl ShuffleUnit {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self::with_activation(cin, cout, stride, Activation::relu, rng)
    }

    fn with_activation<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        stride: usize,
        act: fn() -> Activation,
        rng: &mut R,
    ) -> Self {
        let half = cout / 2;
        let branch_in = if stride == 1 { cin / 2 } else { cin };
        let right = Sequential::new()
            .push(pointwise(branch_in, half, rng))
            .push(norm(half))
            .push(act())
            .push(depthwise(half, stride, rng))
            .push(norm(half))
            .push(pointwise(half, half, rng))
            .push(norm(half))
            .push(act());
        let left = (stride != 1).then(|| {
            Sequential::new()
                .push(depthwise(cin, stride, rng))
                .push(norm(cin))
                .push(pointwise(cin, half, rng))
                .push(norm(half))
                .push(act())
        });
        assert!(stride != 1 || cin == cout, "stride-1 shuffle units keep their width");
        Self {
            left,
            right,
            split: half,
        }
    }
}

impl Layer for ShuffleUnit {
    fn forward(&self, x: &Tensor) -> Tensor {
        let y = match &self.left {
            Some(left) => concat_channels(&left.forward(x), &self.right.forward(x)),
            None => {
                let (a, b) = split_channels(x, self.split);
                concat_channels(&a, &self.right.forward(&b))
            }
        };
        channel_shuffle(&y, 2)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = match &mut self.left {
            Some(left) => concat_channels(&left.forward_train(x), &self.right.forward_train(x)),
            None => {
                let (a, b) = split_channels(x, self.split);
                concat_channels(&a, &self.right.forward_train(&b))
            }
        };
        channel_shuffle(&y, 2)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let c = grad.dims4().1;
        let g = channel_shuffle(grad, c / 2);
        let (ga, gb) = split_channels(&g, self.split);
        let db = self.right.backward(&gb);
        match &mut self.left {
            Some(left) => {
                let mut dx = left.backward(&ga);
                dx.add_assign(&db);
                dx
            }
            None => concat_channels(&ga, &db),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        if let Some(left) = &mut self.left {
            left.visit_params(&format!("{prefix}.left"), f);
        }
        self.right.visit_params(&format!("{prefix}.right"), f);
    }
}

/// Backbone producing `[N, features]`.
fn build_backbone<R: Rng + ?Sized>(kind: BackboneKind, width: usize, rng: &mut R) -> (Sequential, usize) {
    let w = width;
    match kind {
        BackboneKind::Shuffle => {
            let stages = [(2 * w, 2), (4 * w, 3), (8 * w, 2)];
            let mut net = Sequential::new()
                .push(Conv2d::same(3, w, 3, rng))
                .push(norm(w))
                .push(Activation::relu());
            let mut cin = w;
            for (cout, repeats) in stages {
                net = net.push(ShuffleUnit::new(cin, cout, 2, rng));
                for _ in 1..repeats {
                    net = net.push(ShuffleUnit::new(cout, cout, 1, rng));
                }
                cin = cout;
            }
            let feat = 16 * w;
            let net = net
                .push(pointwise(cin, feat, rng))
                .push(norm(feat))
                .push(Activation::relu())
                .push(GlobalAvgPool::default());
            (net, feat)
        }
        BackboneKind::SimpleCnn => {
            let net = Sequential::new()
                .push(Conv2d::same(3, w, 3, rng))
                .push(norm(w))
                .push(Activation::relu())
                .push(AvgPool2::default())
                .push(Conv2d::same(w, 2 * w, 3, rng))
                .push(norm(2 * w))
                .push(Activation::relu())
                .push(AvgPool2::default())
                .push(Conv2d::same(2 * w, 4 * w, 3, rng))
                .push(norm(4 * w))
                .push(Activation::relu())
                .push(GlobalAvgPool::default());
            (net, 4 * w)
        }
    }
}

pub struct DualHeadClassifier {
    config: ModelConfig,
    backbone: Sequential,
    task_head: Linear,
    distill_head: Linear,
}

impl DualHeadClassifier {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        assert!(config.num_classes > 0, "classifier needs at least one class");
        let (backbone, feat) = build_backbone(config.backbone, config.width, rng);
        let task_head = Linear::new(feat, config.num_classes, rng);
        let distill_head = Linear::new(feat, config.teacher_classes, rng);
        Self {
            config,
            backbone,
            task_head,
            distill_head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(task logits [N, K], distillation logits [N, C_t])`.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let f = self.backbone.forward(x);
        (self.task_head.forward(&f), self.distill_head.forward(&f))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, Tensor) {
        let f = self.backbone.forward_train(x);
        (self.task_head.forward_train(&f), self.distill_head.forward_train(&f))
    }

    pub fn backward(&mut self, grad_task: &Tensor, grad_distill: &Tensor) {
        let mut g = self.task_head.backward(grad_task);
        g.add_assign(&self.distill_head.backward(grad_distill));
        self.backbone.backward(&g);
    }
}

impl Module for DualHeadClassifier {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params("backbone", f);
        self.task_head.visit_params("task_head", f);
        self.distill_head.visit_params("distill_head", f);
    }
}
