//! Dense NHWC tensors and the affine INT8 quantization primitives.
//!
//! Activations use per-tensor asymmetric parameters, weights per-tensor
//! symmetric ones (zero point 0). Every rounding step in the crate is
//! round-half-away-from-zero so integer kernels are reproducible bit for bit.

use std::fmt;

use crate::error::{Error, Result};

/// Rank-4 extents in NHWC order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    /// A `1×1×1×len` vector shape.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, 1, 1, len)
    }

    pub fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::I32 => "i32",
        })
    }
}

/// Affine map `real = (q - zero_point) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    scale: f32,
    zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidQParams(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::InvalidQParams(format!(
                "zero point {zero_point} outside [-128, 127]"
            )));
        }
        Ok(QuantParams { scale, zero_point })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    /// Quantizes one finite real value.
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = round_half_away(x as f64 / self.scale as f64) + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        ((q as i32 - self.zero_point) as f64 * self.scale as f64) as f32
    }
}

#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds halfway cases away from zero.
    x.round()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Immutable dense tensor. `i8` tensors always carry quantization
/// parameters, `f32` tensors never do; `i32` tensors (biases) may.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
    qparams: Option<QuantParams>,
}

impl Tensor {
    pub fn new(shape: Shape, data: TensorData, qparams: Option<QuantParams>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} elements, buffer has {}",
                shape.numel(),
                data.len()
            )));
        }
        match (&data, qparams) {
            (TensorData::I8(_), None) => {
                return Err(Error::MissingQParams("i8 tensor".into()));
            }
            (TensorData::F32(_), Some(_)) => {
                return Err(Error::InvalidQParams(
                    "f32 tensors cannot carry quantization parameters".into(),
                ));
            }
            _ => {}
        }
        Ok(Tensor {
            shape,
            data,
            qparams,
        })
    }

    pub fn from_f32(shape: Shape, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data), None)
    }

    pub fn from_i8(shape: Shape, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        Tensor::new(shape, TensorData::I8(data), Some(qparams))
    }

    pub fn from_i32(shape: Shape, data: Vec<i32>, qparams: Option<QuantParams>) -> Result<Self> {
        Tensor::new(shape, TensorData::I32(data), qparams)
    }

    pub fn zeros_f32(shape: Shape) -> Self {
        Tensor {
            shape,
            data: TensorData::F32(vec![0.0; shape.numel()]),
            qparams: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn qparams(&self) -> Option<QuantParams> {
        self.qparams
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::DType(format!("expected f32, found {}", other.dtype()))),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            other => Err(Error::DType(format!("expected i8, found {}", other.dtype()))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::DType(format!("expected i32, found {}", other.dtype()))),
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone(), self.qparams)
    }

    pub(crate) fn into_reshaped(self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data, self.qparams)
    }

    /// Real-valued view: f32 data as is, i8 data dequantized.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.clone()),
            TensorData::I8(_) => Ok(dequantize(self)?.as_f32()?.to_vec()),
            TensorData::I32(v) => match self.qparams {
                Some(qp) => Ok(v
                    .iter()
                    .map(|&q| ((q as i64 - qp.zero_point as i64) as f64 * qp.scale as f64) as f32)
                    .collect()),
                None => Ok(v.iter().map(|&q| q as f32).collect()),
            },
        }
    }
}

/// `clamp(round(x / scale) + zero_point, -128, 127)` elementwise.
pub fn quantize(t: &Tensor, qp: QuantParams) -> Result<Tensor> {
    let src = t.as_f32()?;
    let mut out = Vec::with_capacity(src.len());
    for (index, &x) in src.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index });
        }
        out.push(qp.quantize_value(x));
    }
    Tensor::from_i8(t.shape(), out, qp)
}

pub fn dequantize(t: &Tensor) -> Result<Tensor> {
    let qp = t
        .qparams()
        .ok_or_else(|| Error::MissingQParams("dequantize".into()))?;
    let src = t.as_i8()?;
    let out = src.iter().map(|&q| qp.dequantize_value(q)).collect();
    Tensor::from_f32(t.shape(), out)
}

/// Running min/max over observed activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub min: f32,
    pub max: f32,
    pub count: u64,
}

impl Default for RangeObservation {
    fn default() -> Self {
        RangeObservation::EMPTY
    }
}

impl RangeObservation {
    pub const EMPTY: RangeObservation = RangeObservation {
        min: f32::INFINITY,
        max: f32::NEG_INFINITY,
        count: 0,
    };

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn merge(&self, other: &RangeObservation) -> RangeObservation {
        RangeObservation {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            count: self.count + other.count,
        }
    }

    pub fn observe_slice(&self, values: &[f32]) -> RangeObservation {
        let (min, max) = values
            .iter()
            .fold((self.min, self.max), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        RangeObservation {
            min,
            max,
            count: self.count + values.len() as u64,
        }
    }

    /// Whether `v` lies within the observed range.
    pub fn contains(&self, v: f32) -> bool {
        self.count > 0 && v >= self.min && v <= self.max
    }
}

/// Folds every element of `t` (f32, or i8 dequantized) into `acc`.
pub fn observe(t: &Tensor, acc: RangeObservation) -> RangeObservation {
    match t.data() {
        TensorData::F32(v) => acc.observe_slice(v),
        _ => match t.to_f32_vec() {
            Ok(v) => acc.observe_slice(&v),
            Err(_) => acc,
        },
    }
}

/// Maps a real range onto INT8 parameters. The range is first widened to
/// include zero, so zero always lands exactly on the zero point.
pub fn qparams_from_range(min: f32, max: f32, symmetric: bool) -> Result<QuantParams> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidQParams(format!(
            "non-finite range [{min}, {max}]"
        )));
    }
    if min > max {
        return Err(Error::InvalidQParams(format!("inverted range [{min}, {max}]")));
    }
    let lo = (min as f64).min(0.0);
    let hi = (max as f64).max(0.0);
    if lo == hi {
        return QuantParams::new(1.0, 0);
    }
    if symmetric {
        let scale = to_positive_f32(lo.abs().max(hi.abs()) / 127.0);
        QuantParams::new(scale, 0)
    } else {
        let scale = to_positive_f32((hi - lo) / 255.0);
        let zp = round_half_away(-128.0 - lo / scale as f64).clamp(-128.0, 127.0) as i32;
        QuantParams::new(scale, zp)
    }
}

fn to_positive_f32(x: f64) -> f32 {
    let s = x as f32;
    if s > 0.0 && s.is_finite() {
        s
    } else if s == 0.0 {
        f32::MIN_POSITIVE
    } else {
        f32::MAX
    }
}

/// Fixed-point realization of a real multiplier in (0, 1):
/// `M ≈ mantissa · 2^(−31 − right_shift)` with `mantissa ∈ [2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Multiplier {
    pub mantissa: i32,
    pub right_shift: u32,
}

impl Multiplier {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::MultiplierOutOfRange {
                multiplier: m,
                context: "requantization".into(),
            });
        }
        // m = frac · 2^-shift, frac ∈ [0.5, 1); doubling is exact.
        let mut frac = m;
        let mut shift = 0u32;
        while frac < 0.5 {
            frac *= 2.0;
            shift += 1;
        }
        let mut mantissa = round_half_away(frac * (1u64 << 31) as f64) as i64;
        if mantissa == 1i64 << 31 {
            mantissa -= 1;
        }
        Ok(Multiplier {
            mantissa: mantissa as i32,
            right_shift: shift,
        })
    }

    pub fn to_real(self) -> f64 {
        self.mantissa as f64 * (-(31.0 + self.right_shift as f64)).exp2()
    }

    /// `round_half_away(acc · M)` in pure integer arithmetic.
    #[inline]
    pub fn apply(self, acc: i32) -> i32 {
        let total = 31 + self.right_shift;
        if total >= 63 {
            return 0;
        }
        let prod = acc as i64 * self.mantissa as i64;
        let mag = prod.unsigned_abs();
        let rounded = ((mag + (1u64 << (total - 1))) >> total) as i64;
        if prod < 0 {
            -rounded as i32
        } else {
            rounded as i32
        }
    }
}

/// Multiplier for `s_in · s_w / s_out`.
pub fn requant_multiplier(s_in: f32, s_w: f32, s_out: f32) -> Result<Multiplier> {
    for (name, s) in [("input", s_in), ("weight", s_w), ("output", s_out)] {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidQParams(format!("{name} scale {s} not positive")));
        }
    }
    Multiplier::from_real(s_in as f64 * s_w as f64 / s_out as f64)
}
