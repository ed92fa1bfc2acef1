//! Model IR: an ordered list of operator nodes over integer tensor ids plus
//! a named weight map. Tensor id 0 is the network input; every node writes
//! exactly one new tensor id, and nodes only read ids produced before them.

mod builders;
mod exec;
mod format;

pub use builders::{
    build_custom_dnn, build_mobilenet, build_shufflenet, build_squeezenet, Architecture,
    CustomDnnConfig, MobileNetConfig, ShuffleNetConfig, SqueezeNetConfig, WeightInit,
    INPUT_SHAPE, MOBILENET_WIDTHS, NUM_CLASSES,
};
pub use exec::{argmax, classify, execute, forward, run, ActKey, Forward};
pub use format::{
    encoded_len, from_bytes, import_raw_weights, load_model, save_model, to_bytes, FORMAT_VERSION, MAGIC,
};

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{conv_output_shape, maxpool_output_shape, ConvAttrs, FireAttrs};
use crate::tensor::{DType, QuantParams, Shape, Tensor};

/// Five retinopathy grades; the classifier's output index `i` is label `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DrLabel {
    NoDr = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
    Proliferative = 4,
}

impl DrLabel {
    pub const ALL: [DrLabel; 5] = [
        DrLabel::NoDr,
        DrLabel::Mild,
        DrLabel::Moderate,
        DrLabel::Severe,
        DrLabel::Proliferative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        DrLabel::ALL.get(i).copied()
    }

    /// Directory / file-format name.
    pub fn name(self) -> &'static str {
        match self {
            DrLabel::NoDr => "NoDR",
            DrLabel::Mild => "Mild",
            DrLabel::Moderate => "Moderate",
            DrLabel::Severe => "Severe",
            DrLabel::Proliferative => "Proliferative",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        DrLabel::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl fmt::Display for DrLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    I8,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::I8 => "i8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    DwSepBlock,
    ChannelShuffle,
    Fire,
    MaxPool,
    GlobalAvgPool,
    Relu,
    Dense,
    Flatten,
    Softmax,
}

impl OpKind {
    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        use OpKind::*;
        [
            Conv2d,
            DwSepBlock,
            ChannelShuffle,
            Fire,
            MaxPool,
            GlobalAvgPool,
            Relu,
            Dense,
            Flatten,
            Softmax,
        ]
        .get(code as usize)
        .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DwSepBlock => "dwsep_block",
            OpKind::ChannelShuffle => "channel_shuffle",
            OpKind::Fire => "fire",
            OpKind::MaxPool => "maxpool",
            OpKind::GlobalAvgPool => "gap",
            OpKind::Relu => "relu",
            OpKind::Dense => "dense",
            OpKind::Flatten => "flatten",
            OpKind::Softmax => "softmax",
        }
    }
}

/// Operator plus its attributes. `out_q`/`inner_q` are only set in INT8
/// graphs; a requantizing node without `out_q` in an INT8 graph emits f32
/// (the logits producer).
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d {
        attrs: ConvAttrs,
        relu: bool,
        out_q: Option<QuantParams>,
    },
    /// Depthwise 3×3 (same padding) + ReLU, then pointwise 1×1 + ReLU.
    DwSepBlock {
        stride: usize,
        out_channels: usize,
        inner_q: Option<QuantParams>,
        out_q: Option<QuantParams>,
    },
    ChannelShuffle {
        groups: usize,
    },
    Fire {
        attrs: FireAttrs,
        inner_q: Option<QuantParams>,
        out_q: Option<QuantParams>,
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool {
        out_q: Option<QuantParams>,
    },
    Relu,
    Dense {
        out_features: usize,
        relu: bool,
        out_q: Option<QuantParams>,
    },
    Flatten,
    Softmax,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::DwSepBlock { .. } => OpKind::DwSepBlock,
            Op::ChannelShuffle { .. } => OpKind::ChannelShuffle,
            Op::Fire { .. } => OpKind::Fire,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Relu => OpKind::Relu,
            Op::Dense { .. } => OpKind::Dense,
            Op::Flatten => OpKind::Flatten,
            Op::Softmax => OpKind::Softmax,
        }
    }

    /// Nodes that compute a new value range and therefore need their own
    /// output parameters in an INT8 graph.
    pub fn requantizes(&self) -> bool {
        matches!(
            self,
            Op::Conv2d { .. } | Op::DwSepBlock { .. } | Op::Fire { .. } | Op::GlobalAvgPool { .. } | Op::Dense { .. }
        )
    }

    pub fn out_q(&self) -> Option<QuantParams> {
        match self {
            Op::Conv2d { out_q, .. }
            | Op::DwSepBlock { out_q, .. }
            | Op::Fire { out_q, .. }
            | Op::GlobalAvgPool { out_q }
            | Op::Dense { out_q, .. } => *out_q,
            _ => None,
        }
    }

    pub fn inner_q(&self) -> Option<QuantParams> {
        match self {
            Op::DwSepBlock { inner_q, .. } | Op::Fire { inner_q, .. } => *inner_q,
            _ => None,
        }
    }

    /// Number of intermediate activations internal to the node.
    pub fn inner_slots(&self) -> u8 {
        match self {
            Op::DwSepBlock { .. } | Op::Fire { .. } => 1,
            _ => 0,
        }
    }

    pub(crate) fn set_qparams(&mut self, inner: Option<QuantParams>, out: Option<QuantParams>) {
        match self {
            Op::Conv2d { out_q, .. } | Op::GlobalAvgPool { out_q } | Op::Dense { out_q, .. } => {
                *out_q = out;
            }
            Op::DwSepBlock { inner_q, out_q, .. } | Op::Fire { inner_q, out_q, .. } => {
                *inner_q = inner;
                *out_q = out;
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: u32,
    pub op: Op,
    pub inputs: Vec<u32>,
    pub output: u32,
}

/// Name of a node's weight tensor in the weight map.
pub fn weight_key(node: u32, part: &str) -> String {
    format!("n{node:03}.{part}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub nodes: Vec<OpNode>,
    pub weights: BTreeMap<String, Tensor>,
    pub input_shape: Shape,
    pub num_classes: usize,
    pub precision: Precision,
    /// Quantization of the input tensor; present exactly in INT8 graphs.
    pub input_qparams: Option<QuantParams>,
}

/// Result of shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    /// One entry per tensor id, including the input (id 0).
    pub tensors: BTreeMap<u32, Shape>,
    /// Element type of each tensor id.
    pub dtypes: BTreeMap<u32, DType>,
    /// Intermediate activations inside composite nodes.
    pub inner: BTreeMap<ActKey, Shape>,
    pub output: u32,
}

impl ShapeReport {
    pub fn shape(&self, id: u32) -> Option<Shape> {
        self.tensors.get(&id).copied()
    }
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Shape, num_classes: usize) -> Self {
        ModelGraph {
            name: name.into(),
            nodes: Vec::new(),
            weights: BTreeMap::new(),
            input_shape,
            num_classes,
            precision: Precision::F32,
            input_qparams: None,
        }
    }

    pub fn weight(&self, node: u32, part: &str) -> Result<&Tensor> {
        let key = weight_key(node, part);
        self.weights
            .get(&key)
            .ok_or_else(|| Error::node(node, format!("missing weight {key}")))
    }

    /// Number of scalar parameters (weights and biases).
    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// Raw bytes of all weight payloads.
    pub fn weight_payload_bytes(&self) -> usize {
        self.weights.values().map(Tensor::size_bytes).sum()
    }

    /// Node whose output feeds the final softmax, if any.
    pub fn logits_node(&self) -> Option<usize> {
        let last = self.nodes.last()?;
        if last.op.kind() != OpKind::Softmax {
            return None;
        }
        let src = *last.inputs.first()?;
        self.nodes.iter().position(|n| n.output == src)
    }

    /// Shape inference plus structural, weight and quantization checks.
    pub fn validate(&self) -> Result<ShapeReport> {
        validate(self)
    }
}

pub fn validate(graph: &ModelGraph) -> Result<ShapeReport> {
    let i8_graph = graph.precision == Precision::I8;
    match (i8_graph, graph.input_qparams) {
        (true, None) => return Err(Error::MissingQParams("i8 graph has no input quantization".into())),
        (false, Some(_)) => return Err(Error::Graph("f32 graph carries input quantization".into())),
        _ => {}
    }
    if graph.nodes.is_empty() {
        return Err(Error::Graph("graph has no nodes".into()));
    }
    let mut tensors = BTreeMap::new();
    let mut dtypes = BTreeMap::new();
    let mut qparams: BTreeMap<u32, Option<QuantParams>> = BTreeMap::new();
    let mut inner = BTreeMap::new();
    tensors.insert(0u32, graph.input_shape);
    dtypes.insert(0u32, if i8_graph { DType::I8 } else { DType::F32 });
    qparams.insert(0u32, graph.input_qparams);

    for (idx, node) in graph.nodes.iter().enumerate() {
        let id = node.id;
        if id as usize != idx {
            return Err(Error::node(id, format!("node id {id} at position {idx}")));
        }
        if node.inputs.len() != 1 {
            return Err(Error::node(id, format!("expected 1 input, found {}", node.inputs.len())));
        }
        let src = node.inputs[0];
        let in_shape = *tensors
            .get(&src)
            .ok_or_else(|| Error::node(id, format!("input tensor {src} is not produced before this node")))?;
        let in_dtype = dtypes[&src];
        let in_q = qparams[&src];
        if tensors.contains_key(&node.output) {
            return Err(Error::node(id, format!("output tensor {} already defined", node.output)));
        }

        let quantized_in = in_dtype == DType::I8;
        if node.op.requantizes() && i8_graph && !quantized_in {
            return Err(Error::node(id, "i8 graph feeds an f32 tensor into a quantized kernel"));
        }
        if !i8_graph && (node.op.out_q().is_some() || node.op.inner_q().is_some()) {
            return Err(Error::node(id, "f32 graph node carries quantization parameters"));
        }
        if quantized_in && node.op.inner_slots() > 0 && node.op.inner_q().is_none() {
            return Err(Error::node(id, "i8 composite node missing inner quantization"));
        }

        check_weights(graph, node, in_shape, quantized_in)?;

        let out_shape = infer_shape(node, in_shape).map_err(|e| match e {
            Error::Node { .. } => e,
            other => Error::node(id, other.to_string()),
        })?;
        let (out_dtype, out_q) = if node.op.requantizes() {
            if quantized_in {
                match node.op.out_q() {
                    Some(q) => (DType::I8, Some(q)),
                    None => (DType::F32, None),
                }
            } else {
                (DType::F32, None)
            }
        } else if node.op.kind() == OpKind::Softmax {
            (DType::F32, None)
        } else {
            (in_dtype, in_q)
        };
        if let Some(slot_shape) = inner_shape(node, in_shape) {
            inner.insert(ActKey::Inner { node: id, slot: 0 }, slot_shape);
        }
        tensors.insert(node.output, out_shape);
        dtypes.insert(node.output, out_dtype);
        qparams.insert(node.output, out_q);
    }

    let last = graph.nodes.last().expect("non-empty");
    if last.op.kind() != OpKind::Softmax {
        return Err(Error::node(last.id, "graph must end in softmax"));
    }
    let out_shape = tensors[&last.output];
    if out_shape != Shape::vector(graph.num_classes) {
        return Err(Error::node(
            last.id,
            format!("final tensor {out_shape}, expected 1×1×1×{}", graph.num_classes),
        ));
    }
    if i8_graph {
        let logits = graph.logits_node();
        for (idx, node) in graph.nodes.iter().enumerate() {
            if node.op.requantizes() && node.op.out_q().is_none() && Some(idx) != logits {
                return Err(Error::node(node.id, "i8 graph node missing output quantization"));
            }
        }
    }
    Ok(ShapeReport {
        tensors,
        dtypes,
        inner,
        output: last.output,
    })
}

fn node_err(id: u32) -> impl Fn(Error) -> Error {
    move |e| Error::node(id, e.to_string())
}

fn infer_shape(node: &OpNode, s: Shape) -> Result<Shape> {
    let id = node.id;
    Ok(match &node.op {
        Op::Conv2d { attrs, .. } => conv_output_shape(s, attrs)?,
        Op::DwSepBlock { stride, out_channels, .. } => {
            let dw = conv_output_shape(s, &ConvAttrs::depthwise(3, *stride, s.c))?;
            Shape::new(dw.n, dw.h, dw.w, *out_channels)
        }
        Op::ChannelShuffle { groups } => {
            if *groups == 0 || s.c % groups != 0 {
                return Err(Error::node(id, format!("{} channels not divisible by {groups} groups", s.c)));
            }
            s
        }
        Op::Fire { attrs, .. } => Shape::new(s.n, s.h, s.w, attrs.out_channels()),
        Op::MaxPool { window, stride } => {
            if stride.0 == 0 || stride.1 == 0 {
                return Err(Error::node(id, "pool stride must be positive"));
            }
            maxpool_output_shape(s, *window, *stride)?
        }
        Op::GlobalAvgPool { .. } => {
            if s.h == 0 || s.w == 0 {
                return Err(Error::node(id, "global average pool over empty plane"));
            }
            Shape::new(s.n, 1, 1, s.c)
        }
        Op::Relu => s,
        Op::Flatten => Shape::new(s.n, 1, 1, s.h * s.w * s.c),
        Op::Dense { out_features, .. } => {
            if s.h != 1 || s.w != 1 {
                return Err(Error::node(id, format!("dense input {s} is not flattened")));
            }
            Shape::new(s.n, 1, 1, *out_features)
        }
        Op::Softmax => {
            if s.h != 1 || s.w != 1 {
                return Err(Error::node(id, format!("softmax input {s} is not a vector")));
            }
            s
        }
    })
}

fn inner_shape(node: &OpNode, s: Shape) -> Option<Shape> {
    match &node.op {
        Op::DwSepBlock { stride, .. } => {
            conv_output_shape(s, &ConvAttrs::depthwise(3, *stride, s.c)).ok()
        }
        Op::Fire { attrs, .. } => Some(Shape::new(s.n, s.h, s.w, attrs.squeeze_channels)),
        _ => None,
    }
}

fn expect_weight(
    graph: &ModelGraph,
    node: u32,
    part: &str,
    shape: Shape,
    quantized: bool,
    bias: bool,
) -> Result<()> {
    let t = graph.weight(node, part)?;
    if t.shape() != shape && !(bias && t.len() == shape.numel()) {
        return Err(Error::node(
            node,
            format!("weight {} has shape {}, expected {shape}", weight_key(node, part), t.shape()),
        ));
    }
    let want = match (quantized, bias) {
        (false, _) => DType::F32,
        (true, false) => DType::I8,
        (true, true) => DType::I32,
    };
    if t.dtype() != want {
        return Err(Error::node(
            node,
            format!("weight {} is {}, expected {want}", weight_key(node, part), t.dtype()),
        ));
    }
    if quantized && !bias && t.qparams().is_none() {
        return Err(Error::node(node, format!("weight {} missing qparams", weight_key(node, part))));
    }
    Ok(())
}

fn check_weights(graph: &ModelGraph, node: &OpNode, s: Shape, quantized: bool) -> Result<()> {
    let id = node.id;
    match &node.op {
        Op::Conv2d { attrs, .. } => {
            attrs.check(s.c).map_err(node_err(id))?;
            let w = Shape::new(attrs.kernel.0, attrs.kernel.1, s.c / attrs.groups, attrs.out_channels);
            expect_weight(graph, id, "w", w, quantized, false)?;
            expect_weight(graph, id, "b", Shape::vector(attrs.out_channels), quantized, true)?;
        }
        Op::DwSepBlock { out_channels, .. } => {
            expect_weight(graph, id, "dw.w", Shape::new(3, 3, 1, s.c), quantized, false)?;
            expect_weight(graph, id, "dw.b", Shape::vector(s.c), quantized, true)?;
            expect_weight(graph, id, "pw.w", Shape::new(1, 1, s.c, *out_channels), quantized, false)?;
            expect_weight(graph, id, "pw.b", Shape::vector(*out_channels), quantized, true)?;
        }
        Op::Fire { attrs, .. } => {
            let sq = attrs.squeeze_channels;
            expect_weight(graph, id, "squeeze.w", Shape::new(1, 1, s.c, sq), quantized, false)?;
            expect_weight(graph, id, "squeeze.b", Shape::vector(sq), quantized, true)?;
            let e1 = attrs.expand1_channels;
            expect_weight(graph, id, "expand1.w", Shape::new(1, 1, sq, e1), quantized, false)?;
            expect_weight(graph, id, "expand1.b", Shape::vector(e1), quantized, true)?;
            let e3 = attrs.expand3_channels;
            expect_weight(graph, id, "expand3.w", Shape::new(3, 3, sq, e3), quantized, false)?;
            expect_weight(graph, id, "expand3.b", Shape::vector(e3), quantized, true)?;
        }
        Op::Dense { out_features, .. } => {
            if s.h == 1 && s.w == 1 {
                let w = graph.weight(id, "w")?;
                if w.shape().w != s.c {
                    return Err(Error::node(
                        id,
                        format!("dense inner dimension mismatch: input K={} but weights K={}", s.c, w.shape().w),
                    ));
                }
            }
            expect_weight(graph, id, "w", Shape::new(1, 1, s.c, *out_features), quantized, false)?;
            expect_weight(graph, id, "b", Shape::vector(*out_features), quantized, true)?;
        }
        _ => {}
    }
    Ok(())
}
