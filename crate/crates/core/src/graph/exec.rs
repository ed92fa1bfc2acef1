use super::{DrLabel, ModelGraph, Op, OpNode, Precision};
use crate::error::{Error, Result};
use crate::ops::{self, DwSepParams, Epilogue, FireParams};
use crate::tensor::{dequantize, quantize, DType, Tensor};

/// Identifies an activation: a graph tensor or an intermediate inside a
/// composite node (depthwise output of a separable block, squeeze output of
/// a fire module).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActKey {
    Tensor(u32),
    Inner { node: u32, slot: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Real-valued softmax input.
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

fn prepare_input(graph: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    if input.shape() != graph.input_shape {
        return Err(Error::Shape(format!(
            "input {} does not match model input {}",
            input.shape(),
            graph.input_shape
        )));
    }
    match (graph.precision, input.dtype()) {
        (Precision::F32, DType::F32) => Ok(input.clone()),
        (Precision::I8, DType::F32) => {
            let qp = graph
                .input_qparams
                .ok_or_else(|| Error::MissingQParams("model input".into()))?;
            quantize(input, qp)
        }
        (Precision::I8, DType::I8) if input.qparams() == graph.input_qparams => Ok(input.clone()),
        (Precision::I8, DType::I8) => Err(Error::InvalidQParams(
            "i8 input quantized with parameters other than the model's".into(),
        )),
        (p, d) => Err(Error::DType(format!("{d} input for {p} model"))),
    }
}

/// Runs every node in order, reporting each produced activation (and each
/// composite-node intermediate) to `observer`. Returns the final tensor.
pub fn run(
    graph: &ModelGraph,
    input: &Tensor,
    observer: &mut dyn FnMut(ActKey, &Tensor),
) -> Result<Tensor> {
    let report = graph.validate()?;
    let x = prepare_input(graph, input)?;

    // Last node index reading each tensor; values are dropped after it.
    let max_id = *report.tensors.keys().last().unwrap_or(&0) as usize;
    let mut last_use = vec![usize::MAX; max_id + 1];
    for (i, node) in graph.nodes.iter().enumerate() {
        for &src in &node.inputs {
            last_use[src as usize] = i;
        }
    }
    let mut values: Vec<Option<Tensor>> = vec![None; max_id + 1];
    observer(ActKey::Tensor(0), &x);
    values[0] = Some(x);

    let mut result = None;
    for (i, node) in graph.nodes.iter().enumerate() {
        let src = node.inputs[0] as usize;
        let input = values[src]
            .as_ref()
            .ok_or_else(|| Error::node(node.id, format!("tensor {src} not available")))?;
        let out = exec_node(graph, node, input, observer).map_err(|e| match e {
            Error::Node { .. } => e,
            other => Error::node(node.id, other.to_string()),
        })?;
        observer(ActKey::Tensor(node.output), &out);
        if last_use[src] == i {
            values[src] = None;
        }
        if i + 1 == graph.nodes.len() {
            result = Some(out);
        } else {
            values[node.output as usize] = Some(out);
        }
    }
    Ok(result.expect("validated graph has nodes"))
}

fn exec_node(
    graph: &ModelGraph,
    node: &OpNode,
    x: &Tensor,
    observer: &mut dyn FnMut(ActKey, &Tensor),
) -> Result<Tensor> {
    let id = node.id;
    match &node.op {
        Op::Conv2d { attrs, relu, out_q } => ops::conv2d(
            x,
            graph.weight(id, "w")?,
            Some(graph.weight(id, "b")?),
            attrs,
            &Epilogue { relu: *relu, output: *out_q },
        ),
        Op::DwSepBlock { stride, inner_q, out_q, .. } => {
            let params = DwSepParams {
                dw_weights: graph.weight(id, "dw.w")?,
                dw_bias: Some(graph.weight(id, "dw.b")?),
                pw_weights: graph.weight(id, "pw.w")?,
                pw_bias: Some(graph.weight(id, "pw.b")?),
            };
            let (mid, out) = ops::dwsep_block_traced(x, &params, *stride, *inner_q, *out_q)?;
            observer(ActKey::Inner { node: id, slot: 0 }, &mid);
            Ok(out)
        }
        Op::ChannelShuffle { groups } => ops::channel_shuffle(x, *groups),
        Op::Fire { attrs, inner_q, out_q } => {
            let params = FireParams {
                squeeze_weights: graph.weight(id, "squeeze.w")?,
                squeeze_bias: Some(graph.weight(id, "squeeze.b")?),
                expand1_weights: graph.weight(id, "expand1.w")?,
                expand1_bias: Some(graph.weight(id, "expand1.b")?),
                expand3_weights: graph.weight(id, "expand3.w")?,
                expand3_bias: Some(graph.weight(id, "expand3.b")?),
            };
            let (squeeze, out) = ops::fire_traced(x, &params, attrs, *inner_q, *out_q)?;
            observer(ActKey::Inner { node: id, slot: 0 }, &squeeze);
            Ok(out)
        }
        Op::MaxPool { window, stride } => ops::maxpool2d(x, *window, *stride),
        Op::GlobalAvgPool { out_q } => ops::global_avg_pool(x, *out_q),
        Op::Relu => ops::relu(x),
        Op::Dense { relu, out_q, .. } => ops::dense(
            x,
            graph.weight(id, "w")?,
            Some(graph.weight(id, "b")?),
            &Epilogue { relu: *relu, output: *out_q },
        ),
        Op::Flatten => {
            let s = x.shape();
            x.clone().into_reshaped(crate::tensor::Shape::new(s.n, 1, 1, s.h * s.w * s.c))
        }
        Op::Softmax => ops::softmax(x),
    }
}

/// Full forward pass returning logits and probabilities.
pub fn forward(graph: &ModelGraph, input: &Tensor) -> Result<Forward> {
    let logits_id = graph.nodes.last().and_then(|n| n.inputs.first().copied());
    let mut logits = None;
    let probs = run(graph, input, &mut |key, t| {
        if Some(key) == logits_id.map(ActKey::Tensor) {
            logits = Some(t.clone());
        }
    })?;
    let logits = logits.ok_or_else(|| Error::Graph("logits tensor never produced".into()))?;
    let logits = match logits.dtype() {
        DType::I8 => dequantize(&logits)?.as_f32()?.to_vec(),
        _ => logits.to_f32_vec()?,
    };
    Ok(Forward {
        logits,
        probabilities: probs.as_f32()?.to_vec(),
    })
}

/// Class probabilities for one input.
pub fn execute(graph: &ModelGraph, input: &Tensor) -> Result<Vec<f32>> {
    run(graph, input, &mut |_, _| {})?.as_f32().map(<[f32]>::to_vec)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify(graph: &ModelGraph, input: &Tensor) -> Result<(DrLabel, Vec<f32>)> {
    let probs = execute(graph, input)?;
    let label = DrLabel::from_index(argmax(&probs))
        .ok_or_else(|| Error::Graph(format!("class index beyond {} labels", DrLabel::ALL.len())))?;
    Ok((label, probs))
}
