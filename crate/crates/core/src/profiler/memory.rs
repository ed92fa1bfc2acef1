//! Static activation-arena planning.
//!
//! Every activation gets a lifetime `[first, last]` in node-index steps and
//! a fixed offset in one arena; buffers whose lifetimes intersect never
//! share bytes. Two placements are computed and the smaller kept: best-fit
//! in decreasing size order, and a birth-order placement that alternates
//! between the bottom and the top of the peak-live bound. The second one
//! reaches the peak exactly on chains, where decreasing-size packing can
//! strand a gap.

use crate::error::Result;
use crate::graph::{encoded_len, ActKey, ModelGraph};

/// Size and lifetime of one buffer, lifetimes inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferLife {
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

impl BufferLife {
    pub fn overlaps_in_time(&self, other: &BufferLife) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPlan {
    pub arena_bytes: usize,
    /// Offset of each buffer, in input order.
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub key: ActKey,
    pub offset: usize,
    pub size: usize,
    pub first_use: usize,
    pub last_use: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub arena_bytes: usize,
    pub tensors: Vec<Placement>,
    pub rom_bytes: usize,
}

/// Largest total size of simultaneously live buffers.
pub fn peak_live_bytes(buffers: &[BufferLife]) -> usize {
    let steps = buffers.iter().map(|b| b.last + 1).max().unwrap_or(0);
    let mut live = vec![0i128; steps + 1];
    for b in buffers {
        live[b.first] += b.size as i128;
        live[b.last + 1] -= b.size as i128;
    }
    let mut run = 0i128;
    let mut peak = 0i128;
    for d in live {
        run += d;
        peak = peak.max(run);
    }
    peak as usize
}

fn collides(offset: usize, size: usize, placed: &[(usize, usize)]) -> bool {
    placed.iter().any(|&(o, s)| offset < o + s && o < offset + size)
}

/// Lowest offset where `size` bytes fit among `placed`, preferring the
/// tightest gap (best fit); falls back to the top of the stack.
fn best_fit(size: usize, placed: &mut [(usize, usize)]) -> usize {
    placed.sort_unstable();
    let mut best: Option<(usize, usize)> = None;
    let mut cursor = 0usize;
    for &(o, s) in placed.iter() {
        if o > cursor && o - cursor >= size {
            let gap = o - cursor;
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, cursor));
            }
        }
        cursor = cursor.max(o + s);
    }
    best.map_or(cursor, |(_, off)| off)
}

fn conflicts(buffers: &[BufferLife], offsets: &[Option<usize>], i: usize) -> Vec<(usize, usize)> {
    buffers
        .iter()
        .zip(offsets)
        .enumerate()
        .filter(|&(j, (b, o))| j != i && o.is_some() && b.overlaps_in_time(&buffers[i]))
        .map(|(_, (b, o))| (o.expect("filtered"), b.size))
        .collect()
}

fn arena_of(buffers: &[BufferLife], offsets: &[usize]) -> usize {
    buffers.iter().zip(offsets).map(|(b, &o)| o + b.size).max().unwrap_or(0)
}

fn plan_decreasing(buffers: &[BufferLife]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..buffers.len()).collect();
    order.sort_by(|&a, &b| {
        buffers[b]
            .size
            .cmp(&buffers[a].size)
            .then(buffers[a].first.cmp(&buffers[b].first))
            .then(a.cmp(&b))
    });
    let mut offsets = vec![None; buffers.len()];
    for i in order {
        let mut placed = conflicts(buffers, &offsets, i);
        offsets[i] = Some(best_fit(buffers[i].size, &mut placed));
    }
    offsets.into_iter().map(|o| o.expect("all placed")).collect()
}

fn plan_alternating(buffers: &[BufferLife], bound: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..buffers.len()).collect();
    order.sort_by_key(|&i| (buffers[i].first, i));
    let mut offsets = vec![None; buffers.len()];
    for (k, i) in order.into_iter().enumerate() {
        let size = buffers[i].size;
        let mut placed = conflicts(buffers, &offsets, i);
        let preferred = if k % 2 == 0 { Some(0) } else { bound.checked_sub(size) };
        offsets[i] = Some(match preferred {
            Some(o) if !collides(o, size, &placed) => o,
            _ => best_fit(size, &mut placed),
        });
    }
    offsets.into_iter().map(|o| o.expect("all placed")).collect()
}

/// Assigns non-conflicting offsets to every buffer.
pub fn plan_buffers(buffers: &[BufferLife]) -> BufferPlan {
    let greedy = plan_decreasing(buffers);
    let alternating = plan_alternating(buffers, peak_live_bytes(buffers));
    let (a, b) = (arena_of(buffers, &greedy), arena_of(buffers, &alternating));
    if b < a {
        BufferPlan { arena_bytes: b, offsets: alternating }
    } else {
        BufferPlan { arena_bytes: a, offsets: greedy }
    }
}

/// Lifetimes of every activation in the graph, including composite-node
/// intermediates (live only during their node).
pub fn activation_lifetimes(graph: &ModelGraph) -> Result<Vec<(ActKey, BufferLife)>> {
    let report = graph.validate()?;
    let last_node = graph.nodes.len() - 1;
    let mut out = Vec::new();
    let bytes = |id: u32| report.tensors[&id].numel() * report.dtypes[&id].size_bytes();
    let inner_size = if graph.input_qparams.is_some() { 1 } else { 4 };
    let consumers = |id: u32| graph.nodes.iter().rposition(|n| n.inputs.contains(&id));
    out.push((
        ActKey::Tensor(0),
        BufferLife { size: bytes(0), first: 0, last: consumers(0).unwrap_or(0) },
    ));
    for (i, node) in graph.nodes.iter().enumerate() {
        if let Some(s) = report.inner.get(&ActKey::Inner { node: node.id, slot: 0 }) {
            out.push((
                ActKey::Inner { node: node.id, slot: 0 },
                BufferLife { size: s.numel() * inner_size, first: i, last: i },
            ));
        }
        let last = if i == last_node { i } else { consumers(node.output).unwrap_or(i) };
        out.push((
            ActKey::Tensor(node.output),
            BufferLife { size: bytes(node.output), first: i, last },
        ));
    }
    Ok(out)
}

/// Arena plan for all activations plus the model's ROM footprint.
pub fn plan_memory(graph: &ModelGraph) -> Result<MemoryPlan> {
    let lives = activation_lifetimes(graph)?;
    let buffers: Vec<BufferLife> = lives.iter().map(|&(_, b)| b).collect();
    let plan = plan_buffers(&buffers);
    let tensors = lives
        .iter()
        .zip(&plan.offsets)
        .map(|(&(key, b), &offset)| Placement {
            key,
            offset,
            size: b.size,
            first_use: b.first,
            last_use: b.last,
        })
        .collect();
    Ok(MemoryPlan {
        arena_bytes: plan.arena_bytes,
        tensors,
        rom_bytes: encoded_len(graph),
    })
}
