//! Modality encoders mapping `N x C x H x W` patches to `N x d` features.

use std::any::Any;

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, ConvCache, MaxPool2d,
    MaxPoolCache,
};
use super::params::{ParamId, ParamSet, Real};

/// Built-in backbone families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Three stride-2 3x3 conv blocks and global average pooling.
    SmallConv,
    /// ResNet-34 topology (basic blocks 3/4/6/3, widths 64..512).
    #[serde(rename = "resnet34")]
    Resnet34,
}

impl EncoderKind {
    pub fn default_out_dim(self) -> usize {
        match self {
            EncoderKind::SmallConv => 64,
            EncoderKind::Resnet34 => 512,
        }
    }

    /// Smallest square input the backbone accepts.
    pub fn min_input_size(self) -> usize {
        match self {
            EncoderKind::SmallConv => 8,
            EncoderKind::Resnet34 => 32,
        }
    }
}

/// Opaque per-call state retained by a backbone for its backward pass.
pub struct BackboneCache(Box<dyn Any + Send>);

impl BackboneCache {
    pub fn new<C: Any + Send>(cache: C) -> Self {
        Self(Box::new(cache))
    }

    pub fn downcast<C: Any>(&self) -> &C {
        self.0.downcast_ref().expect("cache produced by the same backbone")
    }
}

/// A feature extractor whose parameters live in a shared [`ParamSet`].
///
/// Implement this to plug in a different backbone; the dual-encoder model
/// only relies on the forward/backward contract.
pub trait Backbone<T: Real>: Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn min_input_size(&self) -> usize;
    fn forward(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, BackboneCache);
    /// Accumulates parameter gradients. The input gradient is not needed.
    fn backward(&self, params: &ParamSet<T>, cache: &BackboneCache, dh: ArrayView2<T>, grads: &mut ParamSet<T>);
}

pub(crate) fn build_backbone<T: Real, R: Rng>(
    kind: EncoderKind,
    params: &mut ParamSet<T>,
    prefix: &str,
    in_channels: usize,
    out_dim: usize,
    rng: &mut R,
) -> Box<dyn Backbone<T>> {
    match kind {
        EncoderKind::SmallConv => Box::new(SmallConv::new(params, prefix, in_channels, out_dim, rng)),
        EncoderKind::Resnet34 => Box::new(Resnet34::new(params, prefix, in_channels, out_dim, rng)),
    }
}

/// Three conv blocks (3x3, stride 2) with widths `d/4, d/2, d`, then global
/// average pooling.
pub struct SmallConv {
    convs: [Conv2d; 3],
    out_dim: usize,
}

struct SmallConvCache<T> {
    convs: Vec<ConvCache<T>>,
    activations: Vec<Array4<T>>,
}

impl SmallConv {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let widths = [(out_dim / 4).max(1), (out_dim / 2).max(1), out_dim];
        let c1 = Conv2d::new(params, &format!("{prefix}.conv1"), in_channels, widths[0], 3, 2, 1, rng);
        let c2 = Conv2d::new(params, &format!("{prefix}.conv2"), widths[0], widths[1], 3, 2, 1, rng);
        let c3 = Conv2d::new(params, &format!("{prefix}.conv3"), widths[1], widths[2], 3, 2, 1, rng);
        Self {
            convs: [c1, c2, c3],
            out_dim,
        }
    }
}

impl<T: Real> Backbone<T> for SmallConv {
    fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn min_input_size(&self) -> usize {
        EncoderKind::SmallConv.min_input_size()
    }

    fn forward(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, BackboneCache) {
        let mut convs = Vec::with_capacity(3);
        let mut activations = Vec::with_capacity(3);
        let mut cur = x.clone();
        for conv in &self.convs {
            let (y, c) = conv.forward(params, &cur);
            convs.push(c);
            cur = relu(y);
            activations.push(cur.clone());
        }
        let h = global_avg_pool(&cur);
        (h, BackboneCache::new(SmallConvCache { convs, activations }))
    }

    fn backward(&self, params: &ParamSet<T>, cache: &BackboneCache, dh: ArrayView2<T>, grads: &mut ParamSet<T>) {
        let cache: &SmallConvCache<T> = cache.downcast();
        let last = &cache.activations[2];
        let (_, _, h, w) = last.dim();
        let mut grad = global_avg_pool_backward(dh, (h, w));
        for i in (0..3).rev() {
            let d = relu_backward(&cache.activations[i], grad);
            grad = self.convs[i].backward(params, &cache.convs[i], &d, grads);
        }
    }
}

/// Basic residual block: `relu(x_short + alpha * conv2(relu(conv1(x))))`.
///
/// No batch statistics are used, so inference on one sample equals the
/// matching row of a batched call. The learnable residual gain `alpha`
/// keeps activations bounded at initialization.
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    gain: ParamId,
}

struct BasicBlockCache<T> {
    c1: ConvCache<T>,
    a1: Array4<T>,
    c2: ConvCache<T>,
    branch: Array4<T>,
    shortcut: Option<ConvCache<T>>,
    out: Array4<T>,
}

const RESIDUAL_GAIN_INIT: f64 = 0.25;

impl BasicBlock {
    fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(params, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng);
        let conv2 = Conv2d::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv2d::new(params, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, rng));
        let gain = params.add(
            format!("{name}.gain"),
            ndarray::ArrayD::from_elem(vec![1], T::from_f64(RESIDUAL_GAIN_INIT)),
        );
        Self {
            conv1,
            conv2,
            shortcut,
            gain,
        }
    }

    fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array4<T>, BasicBlockCache<T>) {
        let (y1, c1) = self.conv1.forward(params, x);
        let a1 = relu(y1);
        let (branch, c2) = self.conv2.forward(params, &a1);
        let (short, sc) = match &self.shortcut {
            Some(conv) => {
                let (y, c) = conv.forward(params, x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let gain = params.get(self.gain)[[0]];
        let out = relu(short + &(&branch * gain));
        (
            out.clone(),
            BasicBlockCache {
                c1,
                a1,
                c2,
                branch,
                shortcut: sc,
                out,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &BasicBlockCache<T>,
        dy: Array4<T>,
        grads: &mut ParamSet<T>,
    ) -> Array4<T> {
        let dsum = relu_backward(&cache.out, dy);
        let gain = params.get(self.gain)[[0]];
        let dgain = (&dsum * &cache.branch).sum();
        grads.get_mut(self.gain)[[0]] += dgain;
        let dbranch = &dsum * gain;
        let da1 = self.conv2.backward(params, &cache.c2, &dbranch, grads);
        let dy1 = relu_backward(&cache.a1, da1);
        let mut dx = self.conv1.backward(params, &cache.c1, &dy1, grads);
        match (&self.shortcut, &cache.shortcut) {
            (Some(conv), Some(c)) => dx += &conv.backward(params, c, &dsum, grads),
            _ => dx += &dsum,
        }
        dx
    }
}

/// ResNet-34 layout: 7x7/2 stem, 3x3/2 max-pool, four stages of basic
/// blocks (3, 4, 6, 3) with widths 64, 128, 256, 512, global average pool.
/// A 1x1 conv maps to `out_dim` when it differs from 512.
pub struct Resnet34 {
    stem: Conv2d,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock>,
    head: Option<Conv2d>,
    in_channels: usize,
    out_dim: usize,
}

struct ResnetCache<T> {
    stem: ConvCache<T>,
    stem_out: Array4<T>,
    pool: MaxPoolCache,
    blocks: Vec<BasicBlockCache<T>>,
    head: Option<(ConvCache<T>, Array4<T>)>,
    final_hw: (usize, usize),
}

impl Resnet34 {
    pub const STAGES: [(usize, usize); 4] = [(3, 64), (4, 128), (6, 256), (3, 512)];

    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let stem = Conv2d::new(params, &format!("{prefix}.stem"), in_channels, 64, 7, 2, 3, rng);
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, &(count, width)) in Self::STAGES.iter().enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.layer{}.{}", stage + 1, b);
                blocks.push(BasicBlock::new(params, &name, cin, width, stride, rng));
                cin = width;
            }
        }
        let head = (out_dim != 512).then(|| Conv2d::new(params, &format!("{prefix}.head"), 512, out_dim, 1, 1, 0, rng));
        Self {
            stem,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            blocks,
            head,
            in_channels,
            out_dim,
        }
    }
}

impl<T: Real> Backbone<T> for Resnet34 {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn min_input_size(&self) -> usize {
        EncoderKind::Resnet34.min_input_size()
    }

    fn forward(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, BackboneCache) {
        let (y, stem) = self.stem.forward(params, x);
        let stem_out = relu(y);
        let (mut cur, pool) = self.pool.forward(&stem_out);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(params, &cur);
            blocks.push(c);
            cur = y;
        }
        let head = self.head.as_ref().map(|conv| {
            let (y, c) = conv.forward(params, &cur);
            cur = relu(y);
            (c, cur.clone())
        });
        let (_, _, h, w) = cur.dim();
        let feat = global_avg_pool(&cur);
        (
            feat,
            BackboneCache::new(ResnetCache {
                stem,
                stem_out,
                pool,
                blocks,
                head,
                final_hw: (h, w),
            }),
        )
    }

    fn backward(&self, params: &ParamSet<T>, cache: &BackboneCache, dh: ArrayView2<T>, grads: &mut ParamSet<T>) {
        let cache: &ResnetCache<T> = cache.downcast();
        let mut grad = global_avg_pool_backward(dh, cache.final_hw);
        if let (Some(conv), Some((c, out))) = (&self.head, &cache.head) {
            let d = relu_backward(out, grad);
            grad = conv.backward(params, c, &d, grads);
        }
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            grad = block.backward(params, c, grad, grads);
        }
        let grad = self.pool.backward(&cache.pool, &grad);
        let d = relu_backward(&cache.stem_out, grad);
        self.stem.backward(params, &cache.stem, &d, grads);
    }
}
