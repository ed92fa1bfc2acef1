//! Small hand-wired graphs covering every operator.
#![allow(dead_code)]

use fundus_core::graph::{weight_key, ModelGraph, Op, OpNode};
use fundus_core::ops::{ConvAttrs, FireAttrs, Padding};
use fundus_core::tensor::{Shape, Tensor};
use rand_chacha::ChaCha8Rng;

use super::{f32_tensor, rng};

pub const SMALL_INPUT: Shape = Shape::new(1, 10, 10, 3);

fn chain(name: &str, input: Shape, classes: usize, ops: Vec<Op>) -> ModelGraph {
    let mut g = ModelGraph::new(name, input, classes);
    for (i, op) in ops.into_iter().enumerate() {
        let id = i as u32;
        g.nodes.push(OpNode { id, op, inputs: vec![id], output: id + 1 });
    }
    g
}

fn put(g: &mut ModelGraph, r: &mut ChaCha8Rng, node: u32, part: &str, shape: Shape, zero: bool) {
    let t = if zero {
        Tensor::zeros_f32(shape)
    } else if part.ends_with('b') {
        f32_tensor(r, shape, -0.1, 0.1)
    } else {
        f32_tensor(r, shape, -0.5, 0.5)
    };
    g.weights.insert(weight_key(node, part), t);
}

/// conv → separable block → shuffle → fire → maxpool → GAP → flatten →
/// dense → softmax on a 10×10×3 input.
pub fn small_graph(seed: u64, zero_bias: bool) -> ModelGraph {
    let mut g = chain(
        "small",
        SMALL_INPUT,
        5,
        vec![
            Op::Conv2d { attrs: ConvAttrs::new(3, 1, Padding::Same, 6), relu: true, out_q: None },
            Op::DwSepBlock { stride: 2, out_channels: 6, inner_q: None, out_q: None },
            Op::ChannelShuffle { groups: 3 },
            Op::Fire { attrs: FireAttrs::new(2, 4, 4), inner_q: None, out_q: None },
            Op::MaxPool { window: (2, 2), stride: (2, 2) },
            Op::GlobalAvgPool { out_q: None },
            Op::Flatten,
            Op::Dense { out_features: 5, relu: false, out_q: None },
            Op::Softmax,
        ],
    );
    let mut r = rng(seed);
    let v = Shape::vector;
    for (node, part, shape) in [
        (0, "w", Shape::new(3, 3, 3, 6)),
        (0, "b", v(6)),
        (1, "dw.w", Shape::new(3, 3, 1, 6)),
        (1, "dw.b", v(6)),
        (1, "pw.w", Shape::new(1, 1, 6, 6)),
        (1, "pw.b", v(6)),
        (3, "squeeze.w", Shape::new(1, 1, 6, 2)),
        (3, "squeeze.b", v(2)),
        (3, "expand1.w", Shape::new(1, 1, 2, 4)),
        (3, "expand1.b", v(4)),
        (3, "expand3.w", Shape::new(3, 3, 2, 4)),
        (3, "expand3.b", v(4)),
        (7, "w", Shape::new(1, 1, 8, 5)),
        (7, "b", v(5)),
    ] {
        put(&mut g, &mut r, node, part, shape, zero_bias && part.ends_with('b'));
    }
    g.validate().expect("small graph is valid");
    g
}

/// Flattened `1×1×1×k` input straight into a dense classifier.
pub fn dense_graph(seed: u64, k: usize, classes: usize) -> ModelGraph {
    let mut g = chain(
        "dense",
        Shape::new(1, 1, 1, k),
        classes,
        vec![Op::Dense { out_features: classes, relu: false, out_q: None }, Op::Softmax],
    );
    let mut r = rng(seed);
    put(&mut g, &mut r, 0, "w", Shape::new(1, 1, k, classes), false);
    put(&mut g, &mut r, 0, "b", Shape::vector(classes), false);
    g
}

pub fn samples(seed: u64, shape: Shape, n: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| f32_tensor(&mut r, shape, 0.0, 1.0)).collect()
}
