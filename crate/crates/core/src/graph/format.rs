//! Self-describing binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EDRM" | version u16 | precision u8 | reserved u8
//! node count u32 | weight count u32
//! nodes:   kind u8, attribute record, input count u8, input ids u32…, output id u32
//! weights: name (u16 length + UTF-8), dtype u8, rank u8, dims u32…,
//!          qparams (flag u8, scale f32, zero point i32), payload
//! CRC-32 of everything above, u32
//! ```
//!
//! Model name, label set and input geometry travel as `meta.*` weight
//! entries so the weight table stays the only variable-length section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DrLabel, ModelGraph, Op, OpKind, OpNode, Precision};
use crate::error::{Error, Result};
use crate::ops::{ConvAttrs, FireAttrs, Padding};
use crate::tensor::{DType, QuantParams, Shape, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"EDRM";
pub const FORMAT_VERSION: u16 = 1;

const META_NAME: &str = "meta.name";
const META_LABELS: &str = "meta.labels";
const META_INPUT: &str = "meta.input";

const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 4;
const QPARAMS_LEN: usize = 9;

fn labels_string() -> String {
    DrLabel::ALL.map(DrLabel::name).join(",")
}

fn attr_len(kind: OpKind) -> usize {
    match kind {
        OpKind::Conv2d => 4 * 4 + 1 + 4 + 4 + 1 + QPARAMS_LEN,
        OpKind::DwSepBlock => 4 + 4 + 2 * QPARAMS_LEN,
        OpKind::ChannelShuffle => 4,
        OpKind::Fire => 3 * 4 + 2 * QPARAMS_LEN,
        OpKind::MaxPool => 4 * 4,
        OpKind::GlobalAvgPool => QPARAMS_LEN,
        OpKind::Dense => 4 + 1 + QPARAMS_LEN,
        OpKind::Relu | OpKind::Flatten | OpKind::Softmax => 0,
    }
}

fn weight_record_len(name: &str, t: &Tensor) -> usize {
    2 + name.len() + 1 + 1 + 4 * 4 + QPARAMS_LEN + t.size_bytes()
}

fn meta_entries(graph: &ModelGraph) -> Result<Vec<(String, Tensor)>> {
    let text = |s: &str| {
        let bytes: Vec<i8> = s.bytes().map(|b| b as i8).collect();
        Tensor::from_i8(Shape::vector(bytes.len()), bytes, QuantParams::new(1.0, 0)?)
    };
    let s = graph.input_shape;
    let dims = [s.n, s.h, s.w, s.c]
        .iter()
        .map(|&d| i32::try_from(d).map_err(|_| Error::Shape(format!("input extent {d} too large"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![
        (META_NAME.to_string(), text(&graph.name)?),
        (META_LABELS.to_string(), text(&labels_string())?),
        (
            META_INPUT.to_string(),
            Tensor::from_i32(Shape::vector(4), dims, graph.input_qparams)?,
        ),
    ])
}

/// Exact serialized size in bytes, computed without serializing.
pub fn encoded_len(graph: &ModelGraph) -> usize {
    let nodes: usize = graph
        .nodes
        .iter()
        .map(|n| 1 + attr_len(n.op.kind()) + 1 + 4 * n.inputs.len() + 4)
        .sum();
    let weights: usize = graph.weights.iter().map(|(k, t)| weight_record_len(k, t)).sum();
    let meta: usize = meta_entries(graph)
        .map(|m| m.iter().map(|(k, t)| weight_record_len(k, t)).sum())
        .unwrap_or(0);
    HEADER_LEN + nodes + weights + meta + 4
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("value {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn qparams(&mut self, q: Option<QuantParams>) {
        match q {
            Some(q) => {
                self.u8(1);
                self.buf.extend_from_slice(&q.scale().to_le_bytes());
                self.buf.extend_from_slice(&q.zero_point().to_le_bytes());
            }
            None => self.buf.extend_from_slice(&[0; QPARAMS_LEN]),
        }
    }

    fn op(&mut self, op: &Op) -> Result<()> {
        self.u8(op.kind().code());
        match op {
            Op::Conv2d { attrs, relu, out_q } => {
                self.usize(attrs.kernel.0)?;
                self.usize(attrs.kernel.1)?;
                self.usize(attrs.stride.0)?;
                self.usize(attrs.stride.1)?;
                self.u8(attrs.padding.code());
                self.usize(attrs.groups)?;
                self.usize(attrs.out_channels)?;
                self.u8(*relu as u8);
                self.qparams(*out_q);
            }
            Op::DwSepBlock { stride, out_channels, inner_q, out_q } => {
                self.usize(*stride)?;
                self.usize(*out_channels)?;
                self.qparams(*inner_q);
                self.qparams(*out_q);
            }
            Op::ChannelShuffle { groups } => self.usize(*groups)?,
            Op::Fire { attrs, inner_q, out_q } => {
                self.usize(attrs.squeeze_channels)?;
                self.usize(attrs.expand1_channels)?;
                self.usize(attrs.expand3_channels)?;
                self.qparams(*inner_q);
                self.qparams(*out_q);
            }
            Op::MaxPool { window, stride } => {
                self.usize(window.0)?;
                self.usize(window.1)?;
                self.usize(stride.0)?;
                self.usize(stride.1)?;
            }
            Op::GlobalAvgPool { out_q } => self.qparams(*out_q),
            Op::Dense { out_features, relu, out_q } => {
                self.usize(*out_features)?;
                self.u8(*relu as u8);
                self.qparams(*out_q);
            }
            Op::Relu | Op::Flatten | Op::Softmax => {}
        }
        Ok(())
    }

    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("weight name too long: {name}")))?;
        self.u16(len);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(t.dtype().code());
        self.u8(4);
        for d in t.shape().dims() {
            self.usize(d)?;
        }
        self.qparams(t.qparams());
        match t.data() {
            TensorData::F32(v) => v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => self.buf.extend(v.iter().map(|&x| x as u8)),
            TensorData::I32(v) => v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(())
    }
}

/// Serializes a validated graph.
pub fn to_bytes(graph: &ModelGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    if let Some(k) = graph.weights.keys().find(|k| k.starts_with("meta.")) {
        return Err(Error::Malformed(format!("weight name {k} uses the reserved meta. prefix")));
    }
    let meta = meta_entries(graph)?;
    let mut w = Writer { buf: Vec::with_capacity(encoded_len(graph)) };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(match graph.precision {
        Precision::F32 => 0,
        Precision::I8 => 1,
    });
    w.u8(0);
    w.usize(graph.nodes.len())?;
    w.usize(graph.weights.len() + meta.len())?;
    for node in &graph.nodes {
        w.op(&node.op)?;
        let count = u8::try_from(node.inputs.len()).map_err(|_| Error::node(node.id, "too many inputs"))?;
        w.u8(count);
        for &i in &node.inputs {
            w.u32(i);
        }
        w.u32(node.output);
    }
    let mut all: BTreeMap<&str, &Tensor> = graph.weights.iter().map(|(k, t)| (k.as_str(), t)).collect();
    for (k, t) in &meta {
        all.insert(k, t);
    }
    for (k, t) in all {
        w.tensor(k, t)?;
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Malformed(format!("{what}: flag byte {v}"))),
        }
    }
    fn qparams(&mut self, what: &str) -> Result<Option<QuantParams>> {
        let b = self.take(QPARAMS_LEN, what)?;
        let scale = f32::from_le_bytes(b[1..5].try_into().expect("4 bytes"));
        let zp = i32::from_le_bytes(b[5..9].try_into().expect("4 bytes"));
        match b[0] {
            0 => Ok(None),
            1 => QuantParams::new(scale, zp)
                .map(Some)
                .map_err(|e| Error::Malformed(format!("{what}: {e}"))),
            v => Err(Error::Malformed(format!("{what}: qparams flag {v}"))),
        }
    }

    fn op(&mut self) -> Result<Op> {
        let code = self.u8("op kind")?;
        let kind = OpKind::from_code(code).ok_or_else(|| Error::Malformed(format!("unknown op kind {code}")))?;
        Ok(match kind {
            OpKind::Conv2d => {
                let kernel = (self.usize("conv kernel")?, self.usize("conv kernel")?);
                let stride = (self.usize("conv stride")?, self.usize("conv stride")?);
                let p = self.u8("conv padding")?;
                let padding = Padding::from_code(p).ok_or_else(|| Error::Malformed(format!("padding code {p}")))?;
                let groups = self.usize("conv groups")?;
                let out_channels = self.usize("conv out channels")?;
                let relu = self.bool("conv relu")?;
                let out_q = self.qparams("conv qparams")?;
                Op::Conv2d {
                    attrs: ConvAttrs { kernel, stride, padding, groups, out_channels },
                    relu,
                    out_q,
                }
            }
            OpKind::DwSepBlock => Op::DwSepBlock {
                stride: self.usize("block stride")?,
                out_channels: self.usize("block channels")?,
                inner_q: self.qparams("block qparams")?,
                out_q: self.qparams("block qparams")?,
            },
            OpKind::ChannelShuffle => Op::ChannelShuffle { groups: self.usize("shuffle groups")? },
            OpKind::Fire => {
                let s = self.usize("fire squeeze")?;
                let e1 = self.usize("fire expand1")?;
                let e3 = self.usize("fire expand3")?;
                Op::Fire {
                    attrs: FireAttrs::new(s, e1, e3),
                    inner_q: self.qparams("fire qparams")?,
                    out_q: self.qparams("fire qparams")?,
                }
            }
            OpKind::MaxPool => Op::MaxPool {
                window: (self.usize("pool window")?, self.usize("pool window")?),
                stride: (self.usize("pool stride")?, self.usize("pool stride")?),
            },
            OpKind::GlobalAvgPool => Op::GlobalAvgPool { out_q: self.qparams("gap qparams")? },
            OpKind::Relu => Op::Relu,
            OpKind::Dense => Op::Dense {
                out_features: self.usize("dense features")?,
                relu: self.bool("dense relu")?,
                out_q: self.qparams("dense qparams")?,
            },
            OpKind::Flatten => Op::Flatten,
            OpKind::Softmax => Op::Softmax,
        })
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16("weight name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "weight name")?)
            .map_err(|_| Error::Malformed("weight name is not UTF-8".into()))?
            .to_string();
        let code = self.u8("weight dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Malformed(format!("{name}: dtype code {code}")))?;
        let rank = self.u8("weight rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Malformed(format!("{name}: rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = self.usize("weight dims")?;
        }
        let shape = Shape::from_dims(dims);
        let qp = self.qparams("weight qparams")?;
        let bytes = dims
            .iter()
            .try_fold(dtype.size_bytes(), |acc, &d| acc.checked_mul(d))
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| Error::Truncated(format!("payload of {name}")))?;
        let raw = self.take(bytes, "weight payload")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        let t = Tensor::new(shape, data, qp).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn meta_text(t: &Tensor, what: &str) -> Result<String> {
    let bytes: Vec<u8> = t
        .as_i8()
        .map_err(|_| Error::Malformed(format!("{what} is not a byte string")))?
        .iter()
        .map(|&b| b as u8)
        .collect();
    String::from_utf8(bytes).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
}

/// Parses and validates a model file image.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("magic".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let precision = match r.u8("precision")? {
        0 => Precision::F32,
        1 => Precision::I8,
        v => return Err(Error::Malformed(format!("precision code {v}"))),
    };
    r.u8("reserved")?;
    let node_count = r.usize("node count")?;
    let weight_count = r.usize("weight count")?;

    // Every node record is at least 10 bytes; every weight record at least 30.
    let mut nodes = Vec::with_capacity(node_count.min(r.remaining() / 10));
    for i in 0..node_count {
        let op = r.op()?;
        let inputs_len = r.u8("input count")? as usize;
        let mut inputs = Vec::with_capacity(inputs_len);
        for _ in 0..inputs_len {
            inputs.push(r.u32("input id")?);
        }
        let output = r.u32("output id")?;
        let id = u32::try_from(i).map_err(|_| Error::Malformed("too many nodes".into()))?;
        nodes.push(OpNode { id, op, inputs, output });
    }
    let mut weights = BTreeMap::new();
    for _ in 0..weight_count {
        let (name, t) = r.tensor()?;
        if weights.insert(name.clone(), t).is_some() {
            return Err(Error::Malformed(format!("duplicate weight {name}")));
        }
    }
    let stored = r.u32("checksum")?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let name = weights
        .remove(META_NAME)
        .ok_or_else(|| Error::Malformed("missing model name".into()))
        .and_then(|t| meta_text(&t, "model name"))?;
    let labels = weights
        .remove(META_LABELS)
        .ok_or_else(|| Error::Malformed("missing label set".into()))
        .and_then(|t| meta_text(&t, "label set"))?;
    if labels != labels_string() {
        return Err(Error::Malformed(format!("unexpected label set {labels}")));
    }
    let input = weights
        .remove(META_INPUT)
        .ok_or_else(|| Error::Malformed("missing input shape".into()))?;
    let dims = input
        .as_i32()
        .ok()
        .filter(|d| d.len() == 4 && d.iter().all(|&v| v > 0))
        .ok_or_else(|| Error::Malformed("bad input shape record".into()))?;
    let input_shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
    if let Some(k) = weights.keys().find(|k| k.starts_with("meta.")) {
        return Err(Error::Malformed(format!("unknown metadata entry {k}")));
    }

    let graph = ModelGraph {
        name,
        nodes,
        weights,
        input_shape,
        num_classes: DrLabel::ALL.len(),
        precision,
        input_qparams: input.qparams(),
    };
    graph.validate()?;
    Ok(graph)
}

pub fn save_model(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(graph)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Replaces f32 weights from a directory holding `manifest.txt` and raw
/// little-endian f32 files. Each manifest line reads
/// `<weight name> <n> <h> <w> <c> <file>`; blank lines and `#` comments are
/// skipped. Shapes must match the graph's existing entries.
pub fn import_raw_weights(graph: &mut ModelGraph, dir: impl AsRef<Path>) -> Result<usize> {
    let dir = dir.as_ref();
    if graph.precision != Precision::F32 {
        return Err(Error::AlreadyQuantized);
    }
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut count = 0;
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Malformed(format!("manifest line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad("expected `name n h w c file`"));
        }
        let mut dims = [0usize; 4];
        for (d, f) in dims.iter_mut().zip(&fields[1..5]) {
            *d = f.parse().map_err(|_| bad(&format!("bad extent {f}")))?;
        }
        let shape = Shape::from_dims(dims);
        let name = fields[0];
        let existing = graph
            .weights
            .get(name)
            .ok_or_else(|| bad(&format!("model has no weight {name}")))?;
        if existing.shape() != shape {
            return Err(bad(&format!("{name} is {} in the model, {shape} in the manifest", existing.shape())));
        }
        let file = dir.join(fields[5]);
        let raw = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if raw.len() != shape.numel() * 4 {
            return Err(bad(&format!("{} holds {} bytes, expected {}", fields[5], raw.len(), shape.numel() * 4)));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(bad(&format!("{name}[{i}] is not finite")));
        }
        graph.weights.insert(name.to_string(), Tensor::from_f32(shape, values)?);
        count += 1;
    }
    graph.validate()?;
    Ok(count)
}
