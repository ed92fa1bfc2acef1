//! Post-training INT8 conversion: min/max calibration over sample inputs,
//! graph rewriting to quantized weights and activation parameters, and a
//! float-versus-quantized fidelity report.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{self, encoded_len, ActKey, ModelGraph, Op, Precision};
use crate::par;
use crate::tensor::{
    observe, qparams_from_range, quantize, DType, QuantParams, RangeObservation, Tensor, TensorData,
};

/// Observed range of every activation of an f32 graph, including the
/// intermediates inside composite nodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeMap {
    ranges: BTreeMap<ActKey, RangeObservation>,
}

impl RangeMap {
    pub fn new() -> Self {
        RangeMap::default()
    }

    pub fn get(&self, key: ActKey) -> Option<RangeObservation> {
        self.ranges.get(&key).copied()
    }

    pub fn insert(&mut self, key: ActKey, range: RangeObservation) {
        self.ranges.insert(key, range);
    }

    pub fn observe(&mut self, key: ActKey, t: &Tensor) {
        let acc = self.ranges.entry(key).or_default();
        *acc = observe(t, *acc);
    }

    /// Key-wise union of two maps.
    pub fn merge(&self, other: &RangeMap) -> RangeMap {
        let mut out = self.clone();
        for (k, r) in &other.ranges {
            let acc = out.ranges.entry(*k).or_default();
            *acc = acc.merge(r);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ActKey, RangeObservation)> + '_ {
        self.ranges.iter().map(|(k, r)| (*k, *r))
    }
}

/// Runs the f32 graph on every sample and records each activation's range.
/// Samples are processed in parallel and the per-sample maps merged.
pub fn calibrate(graph: &ModelGraph, samples: &[Tensor]) -> Result<RangeMap> {
    if graph.precision != Precision::F32 {
        return Err(Error::AlreadyQuantized);
    }
    if samples.is_empty() {
        return Err(Error::Usage("calibration needs at least one sample".into()));
    }
    graph.validate()?;
    let shards = par::map(samples, |x| {
        let mut map = RangeMap::new();
        graph::run(graph, x, &mut |key, t| map.observe(key, t))?;
        Ok::<_, Error>(map)
    });
    let mut merged = RangeMap::new();
    for shard in shards {
        merged = merged.merge(&shard?);
    }
    Ok(merged)
}

/// Input parameters for images normalised to `[0, 1]`.
pub fn input_qparams() -> QuantParams {
    qparams_from_range(0.0, 1.0, false).expect("unit range is valid")
}

fn quantize_weight(t: &Tensor) -> Result<Tensor> {
    let obs = observe(t, RangeObservation::EMPTY);
    let (lo, hi) = if obs.is_empty() { (0.0, 0.0) } else { (obs.min, obs.max) };
    quantize(t, qparams_from_range(lo, hi, true)?)
}

fn quantize_bias(b: &Tensor, acc_scale: f64) -> Result<Tensor> {
    let data = b
        .as_f32()?
        .iter()
        .map(|&v| crate::tensor::round_half_away(v as f64 / acc_scale).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect();
    let qp = QuantParams::new(acc_scale as f32, 0)?;
    Tensor::from_i32(b.shape(), data, Some(qp))
}

/// Largest requantization multiplier the quantizer emits.
const MAX_MULTIPLIER: f64 = 0.99;

/// Activation parameters for an observed range. A range narrower than one
/// accumulator step is widened until `acc_scale / scale` is at most
/// [`MAX_MULTIPLIER`]; finer output steps could not be told apart anyway.
fn fit_qparams(r: RangeObservation, acc_scale: f64) -> Result<QuantParams> {
    let q = qparams_from_range(r.min, r.max, false)?;
    if acc_scale / q.scale() as f64 <= MAX_MULTIPLIER {
        return Ok(q);
    }
    let lo = r.min.min(0.0);
    let span = 255.0 * acc_scale / MAX_MULTIPLIER;
    qparams_from_range(lo, (lo as f64 + span) as f32, false)
}

fn check_multiplier(node: u32, what: &str, acc_scale: f64, out: Option<QuantParams>) -> Result<()> {
    if let Some(q) = out {
        let m = acc_scale / q.scale() as f64;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::MultiplierOutOfRange {
                multiplier: m,
                context: format!("node {node} {what}"),
            });
        }
    }
    Ok(())
}

/// Converts a calibrated f32 graph to INT8.
///
/// Weights are quantized symmetrically per tensor, biases to i32 in units of
/// `s_in · s_w`, activations asymmetrically from `ranges`. The node feeding
/// the softmax keeps an f32 output.
pub fn quantize_graph(graph: &ModelGraph, ranges: &RangeMap) -> Result<ModelGraph> {
    if graph.precision != Precision::F32 {
        return Err(Error::AlreadyQuantized);
    }
    let report = graph.validate()?;
    let logits = graph.logits_node();
    let act_range = |key: ActKey| -> Result<RangeObservation> {
        ranges
            .get(key)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::Usage(format!("range map has no observation for {key:?}")))
    };

    let mut out = graph.clone();
    out.precision = Precision::I8;
    out.input_qparams = Some(input_qparams());
    let mut tensor_q: BTreeMap<u32, QuantParams> = BTreeMap::new();
    tensor_q.insert(0, input_qparams());

    for (idx, node) in graph.nodes.iter().enumerate() {
        let id = node.id;
        let src = node.inputs[0];
        let q_in = tensor_q.get(&src).copied();
        let emits_f32 = Some(idx) == logits;
        let out_r = if node.op.requantizes() && !emits_f32 {
            Some(act_range(ActKey::Tensor(node.output))?)
        } else {
            None
        };
        let inner_r = if node.op.inner_slots() > 0 {
            Some(act_range(ActKey::Inner { node: id, slot: 0 })?)
        } else {
            None
        };
        let s_in = match (node.op.requantizes(), q_in) {
            (true, Some(q)) => q.scale() as f64,
            (true, None) => return Err(Error::node(id, "quantized kernel fed by an f32 tensor")),
            (false, _) => 0.0,
        };

        // (weight part, bias part, feeds the inner slot) per accumulation.
        let parts: &[(&str, &str, bool)] = match &node.op {
            Op::Conv2d { .. } | Op::Dense { .. } => &[("w", "b", false)],
            Op::DwSepBlock { .. } => &[("dw.w", "dw.b", true), ("pw.w", "pw.b", false)],
            Op::Fire { .. } => &[
                ("squeeze.w", "squeeze.b", true),
                ("expand1.w", "expand1.b", false),
                ("expand3.w", "expand3.b", false),
            ],
            _ => &[],
        };
        let mut stages = Vec::with_capacity(parts.len());
        for &(wp, bp, inner) in parts {
            let w = quantize_weight(graph.weight(id, wp)?).map_err(|e| Error::node(id, e.to_string()))?;
            let s_w = w.qparams().expect("quantized weights carry qparams").scale() as f64;
            stages.push((wp, bp, inner, w, s_w));
        }

        let inner_q = match inner_r {
            Some(r) => {
                let s_w = stages.iter().find(|s| s.2).map_or(0.0, |s| s.4);
                Some(fit_qparams(r, s_in * s_w)?)
            }
            None => None,
        };
        let s_mid = inner_q.map_or(s_in, |q| q.scale() as f64);
        let mut out_acc = stages.iter().filter(|s| !s.2).map(|s| s_mid * s.4).fold(0.0, f64::max);
        if let Op::GlobalAvgPool { .. } = &node.op {
            let s = report.tensors[&src];
            out_acc = s_in / (s.h * s.w) as f64;
        }
        let out_q = out_r.map(|r| fit_qparams(r, out_acc)).transpose()?;

        for (wp, bp, inner, w, s_w) in stages {
            let (s_x, target) = if inner { (s_in, inner_q) } else { (s_mid, out_q) };
            let acc_scale = s_x * s_w;
            check_multiplier(id, wp, acc_scale, target)?;
            let b = quantize_bias(graph.weight(id, bp)?, acc_scale).map_err(|e| Error::node(id, e.to_string()))?;
            out.weights.insert(graph::weight_key(id, wp), w);
            out.weights.insert(graph::weight_key(id, bp), b);
        }
        if let (Op::GlobalAvgPool { .. }, Some(q)) = (&node.op, out_q) {
            check_multiplier(id, "average", out_acc, Some(q))?;
        }

        out.nodes[idx].op.set_qparams(inner_q, out_q);
        let produced = if node.op.requantizes() {
            out_q
        } else if node.op.kind() == graph::OpKind::Softmax {
            None
        } else {
            q_in
        };
        if let Some(q) = produced {
            tensor_q.insert(node.output, q);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Float-versus-quantized comparison over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantReport {
    pub samples: usize,
    /// Fraction of samples whose top-1 class agrees.
    pub agreement: f64,
    /// Largest absolute difference between the two graphs' logits.
    pub max_logit_error: f64,
    /// Per node with a quantized output: the largest difference, in output
    /// quantization units, between the candidate's codes and the reference
    /// activation quantized with the same parameters.
    pub layer_unit_error: Vec<(u32, u32)>,
    pub reference_bytes: usize,
    pub candidate_bytes: usize,
}

fn same_structure(a: &ModelGraph, b: &ModelGraph) -> Result<()> {
    if a.nodes.len() != b.nodes.len() {
        return Err(Error::Graph(format!(
            "graphs differ in node count ({} vs {})",
            a.nodes.len(),
            b.nodes.len()
        )));
    }
    for (x, y) in a.nodes.iter().zip(&b.nodes) {
        if x.op.kind() != y.op.kind() || x.inputs != y.inputs || x.output != y.output {
            return Err(Error::node(y.id, format!("{} vs {}", x.op.kind().name(), y.op.kind().name())));
        }
    }
    Ok(())
}

fn unit_error(reference: &Tensor, candidate: &Tensor) -> Result<Option<u32>> {
    let (Some(q), TensorData::I8(codes)) = (candidate.qparams(), candidate.data()) else {
        return Ok(None);
    };
    if candidate.dtype() != DType::I8 {
        return Ok(None);
    }
    let real = match reference.dtype() {
        DType::F32 => reference.clone(),
        _ => Tensor::from_f32(reference.shape(), reference.to_f32_vec()?)?,
    };
    let expected = quantize(&real, q)?;
    let worst = expected
        .as_i8()?
        .iter()
        .zip(codes)
        .map(|(&e, &c)| (e as i32 - c as i32).unsigned_abs())
        .max()
        .unwrap_or(0);
    Ok(Some(worst))
}

struct SampleFidelity {
    agree: bool,
    logit_error: f64,
    layers: BTreeMap<u32, u32>,
}

fn logits_id(g: &ModelGraph) -> u32 {
    g.nodes.last().map_or(0, |n| n.inputs[0])
}

fn compare_sample(reference: &ModelGraph, candidate: &ModelGraph, x: &Tensor) -> Result<SampleFidelity> {
    let mut acts: BTreeMap<u32, Tensor> = BTreeMap::new();
    let ref_probs = graph::run(reference, x, &mut |key, t| {
        if let ActKey::Tensor(id) = key {
            acts.insert(id, t.clone());
        }
    })?;
    let ref_logits = acts
        .get(&logits_id(reference))
        .ok_or_else(|| Error::Graph("reference logits never produced".into()))?
        .to_f32_vec()?;
    let producer: BTreeMap<u32, u32> = candidate.nodes.iter().map(|n| (n.output, n.id)).collect();
    let cand_logits_id = logits_id(candidate);
    let mut cand_logits = None;
    let mut layers = BTreeMap::new();
    let mut failure = None;
    let cand_probs = graph::run(candidate, x, &mut |key, t| {
        let ActKey::Tensor(id) = key else { return };
        if id == cand_logits_id {
            cand_logits = Some(t.to_f32_vec());
        }
        let Some(&node) = producer.get(&id) else { return };
        if !candidate.nodes[node as usize].op.requantizes() {
            return;
        }
        if let Some(r) = acts.get(&id) {
            match unit_error(r, t) {
                Ok(Some(e)) => {
                    layers.insert(node, e);
                }
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let cand_logits = cand_logits.ok_or_else(|| Error::Graph("candidate logits never produced".into()))??;
    let logit_error = ref_logits
        .iter()
        .zip(&cand_logits)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    Ok(SampleFidelity {
        agree: graph::argmax(ref_probs.as_f32()?) == graph::argmax(cand_probs.as_f32()?),
        logit_error,
        layers,
    })
}

/// Runs both graphs on every sample and compares top-1 class, logits and
/// per-layer quantized activations.
pub fn fidelity_report(reference: &ModelGraph, candidate: &ModelGraph, samples: &[Tensor]) -> Result<QuantReport> {
    if samples.is_empty() {
        return Err(Error::Usage("fidelity report needs at least one sample".into()));
    }
    reference.validate()?;
    candidate.validate()?;
    same_structure(reference, candidate)?;
    let per_sample = par::map(samples, |x| compare_sample(reference, candidate, x));
    let mut agree = 0usize;
    let mut max_logit_error = 0.0f64;
    let mut layers: BTreeMap<u32, u32> = BTreeMap::new();
    for s in per_sample {
        let s = s?;
        agree += s.agree as usize;
        max_logit_error = max_logit_error.max(s.logit_error);
        for (node, e) in s.layers {
            let slot = layers.entry(node).or_insert(0);
            *slot = (*slot).max(e);
        }
    }
    Ok(QuantReport {
        samples: samples.len(),
        agreement: agree as f64 / samples.len() as f64,
        max_logit_error,
        layer_unit_error: layers.into_iter().collect(),
        reference_bytes: encoded_len(reference),
        candidate_bytes: encoded_len(candidate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{weight_key, OpNode};
    use crate::ops::{ConvAttrs, Padding};
    use crate::tensor::Shape;

    fn one_conv(weights: Vec<f32>) -> ModelGraph {
        let mut g = ModelGraph::new("conv", Shape::new(1, 2, 2, 1), 5);
        g.nodes.push(OpNode {
            id: 0,
            op: Op::Conv2d {
                attrs: ConvAttrs::new(2, 1, Padding::Valid, 5),
                relu: false,
                out_q: None,
            },
            inputs: vec![0],
            output: 1,
        });
        g.nodes.push(OpNode {
            id: 1,
            op: Op::Conv2d {
                attrs: ConvAttrs::new(1, 1, Padding::Valid, 5),
                relu: false,
                out_q: None,
            },
            inputs: vec![1],
            output: 2,
        });
        g.nodes.push(OpNode { id: 2, op: Op::Softmax, inputs: vec![2], output: 3 });
        g.weights.insert(weight_key(0, "w"), Tensor::from_f32(Shape::new(2, 2, 1, 5), weights).unwrap());
        g.weights.insert(weight_key(0, "b"), Tensor::zeros_f32(Shape::vector(5)));
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        g.weights.insert(weight_key(1, "w"), Tensor::from_f32(Shape::new(1, 1, 5, 5), eye).unwrap());
        g.weights.insert(weight_key(1, "b"), Tensor::zeros_f32(Shape::vector(5)));
        g
    }

    #[test]
    fn emitted_qparams_follow_ranges() {
        let w: Vec<f32> = (0..20).map(|i| (i as f32 - 10.0) / 20.0).collect();
        let g = one_conv(w);
        let mut ranges = RangeMap::new();
        ranges.insert(ActKey::Tensor(1), RangeObservation { min: -1.5, max: 2.5, count: 5 });
        let q = quantize_graph(&g, &ranges).unwrap();
        let expected = qparams_from_range(-1.5, 2.5, false).unwrap();
        assert_eq!(q.nodes[0].op.out_q(), Some(expected));
        assert_eq!(q.nodes[1].op.out_q(), None);
        let wq = q.weight(0, "w").unwrap().qparams().unwrap();
        assert_eq!(wq, qparams_from_range(-0.5, 0.45, true).unwrap());
        assert_eq!(q.input_qparams, Some(input_qparams()));
    }

    #[test]
    fn missing_range_is_reported() {
        let g = one_conv(vec![0.1; 20]);
        assert!(quantize_graph(&g, &RangeMap::new()).is_err());
    }

    #[test]
    fn zero_weights_still_execute() {
        let g = one_conv(vec![0.0; 20]);
        let x = Tensor::from_f32(Shape::new(1, 2, 2, 1), vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let ranges = calibrate(&g, std::slice::from_ref(&x)).unwrap();
        let q = quantize_graph(&g, &ranges).unwrap();
        let wq = q.weight(0, "w").unwrap().qparams().unwrap();
        assert_eq!((wq.scale(), wq.zero_point()), (1.0, 0));
        let p = graph::execute(&q, &x).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn narrow_range_is_widened_below_unit_multiplier() {
        let w: Vec<f32> = (0..20).map(|i| (i as f32 - 10.0) / 20.0).collect();
        let g = one_conv(w);
        let mut ranges = RangeMap::new();
        ranges.insert(ActKey::Tensor(1), RangeObservation { min: 0.0, max: 1e-4, count: 5 });
        let q = quantize_graph(&g, &ranges).unwrap();
        let out = q.nodes[0].op.out_q().unwrap();
        let acc = input_qparams().scale() as f64 * (0.5f64 / 127.0);
        let m = acc / out.scale() as f64;
        assert!(m < 1.0 && (m - 0.99).abs() < 1e-5, "{m}");
        assert_eq!(out.zero_point(), -128);
    }

    #[test]
    fn requantized_graph_rejected() {
        let g = one_conv(vec![0.1; 20]);
        let x = Tensor::from_f32(Shape::new(1, 2, 2, 1), vec![0.5; 4]).unwrap();
        let q = quantize_graph(&g, &calibrate(&g, &[x.clone()]).unwrap()).unwrap();
        assert!(matches!(calibrate(&q, &[x]), Err(Error::AlreadyQuantized)));
    }
}
