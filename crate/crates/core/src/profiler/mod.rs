//! Static cost analysis of a model graph: multiply-accumulate counts, an
//! activation arena plan, exact ROM size and per-device latency estimates.

mod latency;
mod memory;

pub use latency::{
    estimate_latency, fit_device_profiles, fit_report, reference_profile_text, Anchor, DeviceClass, DeviceProfile,
    ProfileSet, FitRow, REPORTED_LATENCY_MS, REFERENCE_ROM_BYTES,
};
pub use memory::{
    activation_lifetimes, peak_live_bytes, plan_buffers, plan_memory, BufferLife, BufferPlan, MemoryPlan, Placement,
};

use crate::error::Result;
use crate::graph::{encoded_len, ModelGraph, Op};
use crate::ops::ConvAttrs;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacReport {
    /// One count per node, in node order.
    pub per_node: Vec<u64>,
    pub total: u64,
    /// Bytes of each node's output tensor.
    pub output_bytes: Vec<usize>,
}

fn conv_macs(attrs: &ConvAttrs, cin: usize, hout: usize, wout: usize) -> u64 {
    let (kh, kw) = attrs.kernel;
    (kh * kw * (cin / attrs.groups) * attrs.out_channels * hout * wout) as u64
}

/// Multiply-accumulates per node. Pooling, activation, shuffle, flatten
/// and softmax count as zero.
pub fn count_macs(graph: &ModelGraph) -> Result<MacReport> {
    let report = graph.validate()?;
    let mut per_node = Vec::with_capacity(graph.nodes.len());
    let mut output_bytes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let s = report.tensors[&node.inputs[0]];
        let o = report.tensors[&node.output];
        let macs = match &node.op {
            Op::Conv2d { attrs, .. } => conv_macs(attrs, s.c, o.h, o.w),
            Op::DwSepBlock { out_channels, .. } => {
                let (h, w) = (o.h, o.w);
                (9 * s.c * h * w + s.c * out_channels * h * w) as u64
            }
            Op::Fire { attrs, .. } => {
                let hw = s.h * s.w;
                let sq = attrs.squeeze_channels;
                (s.c * sq * hw + sq * attrs.expand1_channels * hw + 9 * sq * attrs.expand3_channels * hw) as u64
            }
            Op::Dense { out_features, .. } => (s.c * out_features * s.n) as u64,
            _ => 0,
        };
        per_node.push(macs);
        output_bytes.push(o.numel() * report.dtypes[&node.output].size_bytes());
    }
    Ok(MacReport {
        total: per_node.iter().sum(),
        per_node,
        output_bytes,
    })
}

/// Exact size of the serialized model file.
pub fn estimate_rom(graph: &ModelGraph) -> Result<usize> {
    graph.validate()?;
    Ok(encoded_len(graph))
}
