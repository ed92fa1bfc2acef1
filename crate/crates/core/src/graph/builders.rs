//! The four classifier architectures. Layer schedules are plain config
//! values; the defaults are sized so each INT8 model file lands near the
//! deployed model sizes (MobileNet ≈ 3.5 MB, ShuffleNet ≈ 68.5 KB,
//! SqueezeNet ≈ 176 KB, custom DNN ≈ 1.6 MB).
//!
//! Every convolution except the classifier is followed by batch
//! normalisation, folded into the convolution when the graph is built.
//! Dropout is an inference no-op and is not materialised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{weight_key, ModelGraph, Op, OpNode};
use crate::error::{Error, Result};
use crate::ops::{conv_output_shape, fold_batchnorm, maxpool_output_shape, BatchNormParams, ConvAttrs, FireAttrs, Padding};
use crate::tensor::{Shape, Tensor};

pub const INPUT_SHAPE: Shape = Shape::new(1, 224, 224, 3);
pub const NUM_CLASSES: usize = 5;
pub const MOBILENET_WIDTHS: [f32; 4] = [0.25, 0.5, 0.75, 1.0];
const BN_EPSILON: f32 = 1e-3;

/// Seeded uniform initialisation in `[-limit, limit]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightInit {
    pub seed: u64,
    pub limit: f32,
}

impl WeightInit {
    pub const DEFAULT_SEED: u64 = 20_240_611;

    pub fn seeded(seed: u64) -> Self {
        WeightInit { seed, limit: 0.05 }
    }
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::seeded(WeightInit::DEFAULT_SEED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    MobileNet,
    ShuffleNet,
    SqueezeNet,
    CustomDnn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::MobileNet,
        Architecture::ShuffleNet,
        Architecture::SqueezeNet,
        Architecture::CustomDnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MobileNet => "mobilenet",
            Architecture::ShuffleNet => "shufflenet",
            Architecture::SqueezeNet => "squeezenet",
            Architecture::CustomDnn => "customdnn",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Default configuration with the given initialisation.
    pub fn build_default(self, init: WeightInit) -> Result<ModelGraph> {
        match self {
            Architecture::MobileNet => build_mobilenet(&MobileNetConfig { init, ..Default::default() }),
            Architecture::ShuffleNet => build_shufflenet(&ShuffleNetConfig { init, ..Default::default() }),
            Architecture::SqueezeNet => build_squeezenet(&SqueezeNetConfig { init, ..Default::default() }),
            Architecture::CustomDnn => build_custom_dnn(&CustomDnnConfig { init, ..Default::default() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileNetConfig {
    pub width_multiplier: f32,
    pub stem_channels: usize,
    /// (pointwise output channels, depthwise stride) per separable block.
    pub blocks: Vec<(usize, usize)>,
    pub init: WeightInit,
}

impl Default for MobileNetConfig {
    fn default() -> Self {
        let mut blocks = vec![(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)];
        blocks.extend([(512, 1); 5]);
        blocks.extend([(1024, 2), (1024, 1)]);
        MobileNetConfig {
            width_multiplier: 1.0,
            stem_channels: 32,
            blocks,
            init: WeightInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleNetConfig {
    pub groups: usize,
    pub width_multiplier: f32,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// (output channels, block count); the first block of a stage strides 2.
    pub stages: Vec<(usize, usize)>,
    /// Output channels / bottleneck channels.
    pub bottleneck_ratio: usize,
    pub init: WeightInit,
}

impl Default for ShuffleNetConfig {
    fn default() -> Self {
        ShuffleNetConfig {
            groups: 3,
            width_multiplier: 1.0,
            stem_channels: 24,
            stem_stride: 1,
            stages: vec![(48, 2), (96, 4), (240, 2)],
            bottleneck_ratio: 2,
            init: WeightInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeNetConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub fires: Vec<FireAttrs>,
    /// Fire indices preceded by a 2×2/2 max-pool.
    pub pool_before: Vec<usize>,
    pub init: WeightInit,
}

impl Default for SqueezeNetConfig {
    fn default() -> Self {
        SqueezeNetConfig {
            stem_channels: 48,
            stem_stride: 2,
            fires: vec![
                FireAttrs::new(8, 32, 32),
                FireAttrs::new(8, 32, 32),
                FireAttrs::new(16, 64, 64),
                FireAttrs::new(16, 64, 64),
                FireAttrs::new(24, 96, 96),
                FireAttrs::new(24, 96, 96),
                FireAttrs::new(32, 128, 128),
                FireAttrs::new(32, 128, 128),
            ],
            pool_before: vec![4, 7],
            init: WeightInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomDnnConfig {
    /// (output channels, square kernel) per valid conv, each followed by a
    /// 2×2/2 max-pool.
    pub filters: Vec<(usize, usize)>,
    pub hidden: usize,
    pub init: WeightInit,
}

impl Default for CustomDnnConfig {
    fn default() -> Self {
        CustomDnnConfig {
            filters: vec![(48, 3), (64, 3), (128, 3), (128, 3)],
            hidden: 72,
            init: WeightInit::default(),
        }
    }
}

struct Builder {
    graph: ModelGraph,
    rng: ChaCha8Rng,
    limit: f32,
    current: u32,
    shape: Shape,
}

impl Builder {
    fn new(name: &str, init: WeightInit) -> Self {
        Builder {
            graph: ModelGraph::new(name, INPUT_SHAPE, NUM_CLASSES),
            rng: ChaCha8Rng::seed_from_u64(init.seed),
            limit: init.limit,
            current: 0,
            shape: INPUT_SHAPE,
        }
    }

    fn next_id(&self) -> u32 {
        self.graph.nodes.len() as u32
    }

    fn push(&mut self, op: Op, out_shape: Shape) {
        let id = self.next_id();
        self.graph.nodes.push(OpNode {
            id,
            op,
            inputs: vec![self.current],
            output: id + 1,
        });
        self.current = id + 1;
        self.shape = out_shape;
    }

    fn uniform(&mut self, shape: Shape) -> Tensor {
        let limit = self.limit;
        let data = (0..shape.numel()).map(|_| self.rng.gen_range(-limit..=limit)).collect();
        Tensor::from_f32(shape, data).expect("length matches shape")
    }

    /// Random weights followed by folded batch-norm whose running variance is
    /// the pre-activation variance of a unit-power input, halved for ReLU.
    fn bn_weights(&mut self, node: u32, part: &str, shape: Shape) -> Result<()> {
        let w = self.uniform(shape);
        let fan_in = (shape.n * shape.h * shape.w) as f32;
        let mut bn = BatchNormParams::identity(shape.c, BN_EPSILON);
        bn.moving_var = vec![fan_in * self.limit * self.limit / 6.0; shape.c];
        let (w, b) = fold_batchnorm(&w, None, &bn)?;
        self.graph.weights.insert(weight_key(node, &format!("{part}w")), w);
        self.graph.weights.insert(weight_key(node, &format!("{part}b")), b);
        Ok(())
    }

    fn plain_weights(&mut self, node: u32, shape: Shape) {
        let w = self.uniform(shape);
        self.graph.weights.insert(weight_key(node, "w"), w);
        self.graph
            .weights
            .insert(weight_key(node, "b"), Tensor::zeros_f32(Shape::vector(shape.c)));
    }

    fn conv(&mut self, attrs: ConvAttrs, relu: bool, batch_norm: bool) -> Result<()> {
        let id = self.next_id();
        let out = conv_output_shape(self.shape, &attrs).map_err(|e| Error::node(id, e.to_string()))?;
        let ws = Shape::new(attrs.kernel.0, attrs.kernel.1, self.shape.c / attrs.groups, attrs.out_channels);
        if batch_norm {
            self.bn_weights(id, "", ws)?;
        } else {
            self.plain_weights(id, ws);
        }
        self.push(Op::Conv2d { attrs, relu, out_q: None }, out);
        Ok(())
    }

    fn dwsep(&mut self, stride: usize, out_channels: usize) -> Result<()> {
        let id = self.next_id();
        let c = self.shape.c;
        let dw = conv_output_shape(self.shape, &ConvAttrs::depthwise(3, stride, c))
            .map_err(|e| Error::node(id, e.to_string()))?;
        self.bn_weights(id, "dw.", Shape::new(3, 3, 1, c))?;
        self.bn_weights(id, "pw.", Shape::new(1, 1, c, out_channels))?;
        self.push(
            Op::DwSepBlock { stride, out_channels, inner_q: None, out_q: None },
            Shape::new(dw.n, dw.h, dw.w, out_channels),
        );
        Ok(())
    }

    fn fire(&mut self, attrs: FireAttrs) -> Result<()> {
        let id = self.next_id();
        let c = self.shape.c;
        let sq = attrs.squeeze_channels;
        self.bn_weights(id, "squeeze.", Shape::new(1, 1, c, sq))?;
        self.bn_weights(id, "expand1.", Shape::new(1, 1, sq, attrs.expand1_channels))?;
        self.bn_weights(id, "expand3.", Shape::new(3, 3, sq, attrs.expand3_channels))?;
        let s = self.shape;
        self.push(
            Op::Fire { attrs, inner_q: None, out_q: None },
            Shape::new(s.n, s.h, s.w, attrs.out_channels()),
        );
        Ok(())
    }

    fn shuffle(&mut self, groups: usize) -> Result<()> {
        if self.shape.c % groups != 0 {
            return Err(Error::InvalidAttr(format!(
                "channel shuffle over {} channels not divisible by {groups} groups",
                self.shape.c
            )));
        }
        let s = self.shape;
        self.push(Op::ChannelShuffle { groups }, s);
        Ok(())
    }

    fn maxpool(&mut self, window: usize, stride: usize) -> Result<()> {
        let id = self.next_id();
        let out = maxpool_output_shape(self.shape, (window, window), (stride, stride))
            .map_err(|e| Error::node(id, e.to_string()))?;
        self.push(Op::MaxPool { window: (window, window), stride: (stride, stride) }, out);
        Ok(())
    }

    fn gap(&mut self) {
        let s = self.shape;
        self.push(Op::GlobalAvgPool { out_q: None }, Shape::new(s.n, 1, 1, s.c));
    }

    fn flatten(&mut self) {
        let s = self.shape;
        self.push(Op::Flatten, Shape::new(s.n, 1, 1, s.h * s.w * s.c));
    }

    fn dense(&mut self, out_features: usize, relu: bool) {
        let id = self.next_id();
        let k = self.shape.c;
        self.plain_weights(id, Shape::new(1, 1, k, out_features));
        let n = self.shape.n;
        self.push(Op::Dense { out_features, relu, out_q: None }, Shape::new(n, 1, 1, out_features));
    }

    fn finish(mut self) -> Result<ModelGraph> {
        let s = self.shape;
        self.push(Op::Softmax, s);
        self.graph.validate()?;
        Ok(self.graph)
    }
}

fn scaled(channels: usize, multiplier: f32) -> usize {
    ((channels as f32 * multiplier).round() as usize).max(1)
}

/// 3×3/2 stem, depthwise-separable blocks, global average pool, dense → 5.
pub fn build_mobilenet(config: &MobileNetConfig) -> Result<ModelGraph> {
    let a = config.width_multiplier;
    if !MOBILENET_WIDTHS.contains(&a) {
        return Err(Error::InvalidAttr(format!(
            "MobileNet width multiplier {a} not one of {MOBILENET_WIDTHS:?}"
        )));
    }
    let mut b = Builder::new(&format!("mobilenet-{a}"), config.init);
    b.conv(ConvAttrs::new(3, 2, Padding::Same, scaled(config.stem_channels, a)), true, true)?;
    for &(out, stride) in &config.blocks {
        b.dwsep(stride, scaled(out, a))?;
    }
    b.gap();
    b.dense(NUM_CLASSES, false);
    b.finish()
}

/// Stem conv + max-pool, stages of shuffle units
/// (group 1×1 → shuffle → depthwise 3×3 → group 1×1), GAP, dense → 5.
pub fn build_shufflenet(config: &ShuffleNetConfig) -> Result<ModelGraph> {
    let g = config.groups;
    if g == 0 {
        return Err(Error::InvalidAttr("ShuffleNet groups must be positive".into()));
    }
    if !(config.width_multiplier > 0.0 && config.width_multiplier.is_finite()) {
        return Err(Error::InvalidAttr(format!(
            "ShuffleNet width multiplier {} must be positive",
            config.width_multiplier
        )));
    }
    if config.bottleneck_ratio == 0 {
        return Err(Error::InvalidAttr("bottleneck ratio must be positive".into()));
    }
    let divisible = |c: usize, what: &str| -> Result<()> {
        if c % g != 0 {
            Err(Error::InvalidAttr(format!("{what} channel count {c} not divisible by groups {g}")))
        } else {
            Ok(())
        }
    };
    let stem = scaled(config.stem_channels, config.width_multiplier);
    divisible(stem, "stem")?;
    let mut b = Builder::new(&format!("shufflenet-g{g}-{}", config.width_multiplier), config.init);
    b.conv(ConvAttrs::new(3, config.stem_stride, Padding::Same, stem), true, true)?;
    b.maxpool(2, 2)?;
    for (stage, &(out, repeats)) in config.stages.iter().enumerate() {
        let out = scaled(out, config.width_multiplier);
        divisible(out, &format!("stage {stage} output"))?;
        if out % config.bottleneck_ratio != 0 {
            return Err(Error::InvalidAttr(format!(
                "stage {stage} output {out} not divisible by bottleneck ratio {}",
                config.bottleneck_ratio
            )));
        }
        let mid = out / config.bottleneck_ratio;
        divisible(mid, &format!("stage {stage} bottleneck"))?;
        for i in 0..repeats {
            let stride = if i == 0 { 2 } else { 1 };
            b.conv(ConvAttrs::new(1, 1, Padding::Valid, mid).with_groups(g), true, true)?;
            b.shuffle(g)?;
            b.conv(ConvAttrs::depthwise(3, stride, mid), false, true)?;
            b.conv(ConvAttrs::new(1, 1, Padding::Valid, out).with_groups(g), true, true)?;
        }
    }
    b.gap();
    b.dense(NUM_CLASSES, false);
    b.finish()
}

/// Stem conv, fire modules with interleaved max-pools, 1×1 conv → 5, GAP.
pub fn build_squeezenet(config: &SqueezeNetConfig) -> Result<ModelGraph> {
    let mut b = Builder::new("squeezenet", config.init);
    b.conv(ConvAttrs::new(3, config.stem_stride, Padding::Same, config.stem_channels), true, true)?;
    for (i, attrs) in config.fires.iter().enumerate() {
        if config.pool_before.contains(&i) {
            b.maxpool(2, 2)?;
        }
        b.fire(*attrs)?;
    }
    b.conv(ConvAttrs::new(1, 1, Padding::Valid, NUM_CLASSES), false, false)?;
    b.gap();
    b.finish()
}

/// Valid conv + 2×2 max-pool pairs, flatten, dense(hidden) + ReLU, dense → 5.
pub fn build_custom_dnn(config: &CustomDnnConfig) -> Result<ModelGraph> {
    if config.filters.is_empty() {
        return Err(Error::InvalidAttr("custom DNN needs at least one conv layer".into()));
    }
    let mut b = Builder::new("customdnn", config.init);
    for (layer, &(out, k)) in config.filters.iter().enumerate() {
        let s = b.shape;
        if s.h < k || s.w < k {
            return Err(Error::InvalidAttr(format!(
                "layer {layer}: {k}×{k} conv on {}×{} feature map leaves no output",
                s.h, s.w
            )));
        }
        b.conv(ConvAttrs::new(k, 1, Padding::Valid, out), true, true)?;
        let s = b.shape;
        if s.h < 2 || s.w < 2 {
            return Err(Error::InvalidAttr(format!(
                "layer {layer}: pooling {}×{} feature map goes below 1×1",
                s.h, s.w
            )));
        }
        b.maxpool(2, 2)?;
    }
    b.flatten();
    b.dense(config.hidden, true);
    b.dense(NUM_CLASSES, false);
    b.finish()
}
