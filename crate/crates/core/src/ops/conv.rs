use std::ops::{AddAssign, Mul};

use super::{ConvAttrs, Epilogue, Padding};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{requant_multiplier, DType, QuantParams, Shape, Tensor};

/// Output extent and leading pad along one axis.
pub fn output_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidAttr("stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::Shape(format!(
                    "kernel extent {kernel} larger than input extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            if input == 0 {
                return Err(Error::Shape("empty input extent".into()));
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

pub fn conv_output_shape(input: Shape, attrs: &ConvAttrs) -> Result<Shape> {
    attrs.check(input.c)?;
    let (oh, _) = output_dim(input.h, attrs.kernel.0, attrs.stride.0, attrs.padding)
        .map_err(|e| Error::Shape(format!("height: {e}")))?;
    let (ow, _) = output_dim(input.w, attrs.kernel.1, attrs.stride.1, attrs.padding)
        .map_err(|e| Error::Shape(format!("width: {e}")))?;
    Ok(Shape::new(input.n, oh, ow, attrs.out_channels))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    input: Shape,
    output: Shape,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn new(input: Shape, weights: Shape, attrs: &ConvAttrs) -> Result<Self> {
        let output = conv_output_shape(input, attrs)?;
        let cin_g = input.c / attrs.groups;
        let expected = Shape::new(attrs.kernel.0, attrs.kernel.1, cin_g, attrs.out_channels);
        if weights != expected {
            return Err(Error::Shape(format!(
                "weights {weights} do not match kernel/channels {expected} \
                 (in_channels {}, groups {})",
                input.c, attrs.groups
            )));
        }
        let (_, pad_top) = output_dim(input.h, attrs.kernel.0, attrs.stride.0, attrs.padding)?;
        let (_, pad_left) = output_dim(input.w, attrs.kernel.1, attrs.stride.1, attrs.padding)?;
        Ok(Geometry {
            input,
            output,
            kh: attrs.kernel.0,
            kw: attrs.kernel.1,
            sh: attrs.stride.0,
            sw: attrs.stride.1,
            pad_top,
            pad_left,
            groups: attrs.groups,
            cin_g,
            cout_g: attrs.out_channels / attrs.groups,
        })
    }
}

/// Direct convolution without bias. Per output element the reduction runs
/// over (ky, kx, ci) in that order, skipping taps that fall in the padding.
fn accumulate<A>(x: &[A], w: &[A], g: &Geometry) -> Vec<A>
where
    A: Copy + Default + AddAssign + Mul<Output = A> + Send + Sync,
{
    let Shape { h: ih, w: iw, c: cin, .. } = g.input;
    let Shape { h: oh, w: ow, c: cout, .. } = g.output;
    let mut out = vec![A::default(); g.output.numel()];
    let depthwise = g.cin_g == 1 && g.cout_g == 1;
    par::for_each_chunk(&mut out, ow * cout, |row, out_row| {
        let b = row / oh;
        let oy = row % oh;
        for ox in 0..ow {
            let acc = &mut out_row[ox * cout..(ox + 1) * cout];
            for ky in 0..g.kh {
                let iy = (oy * g.sh + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.sw + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let base = ((b * ih + iy as usize) * iw + ix as usize) * cin;
                    let px = &x[base..base + cin];
                    let tap = (ky * g.kw + kx) * g.cin_g * cout;
                    if depthwise {
                        let wrow = &w[tap..tap + cout];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(px).zip(wrow) {
                            *a += xv * wv;
                        }
                    } else {
                        for grp in 0..g.groups {
                            let acc_g = &mut acc[grp * g.cout_g..(grp + 1) * g.cout_g];
                            for ci in 0..g.cin_g {
                                let xv = px[grp * g.cin_g + ci];
                                let off = tap + ci * cout + grp * g.cout_g;
                                let wrow = &w[off..off + g.cout_g];
                                for (a, &wv) in acc_g.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::Shape(format!(
                "bias has {} elements, expected out_channels {channels}",
                b.len()
            )));
        }
    }
    Ok(())
}

/// 2-D convolution with optional grouping, fused bias and epilogue.
///
/// Inputs and weights must both be f32 or both be i8. On the i8 path the
/// bias is i32 in units of `s_in · s_w`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    attrs: &ConvAttrs,
    epilogue: &Epilogue,
) -> Result<Tensor> {
    let geo = Geometry::new(input.shape(), weights.shape(), attrs)?;
    check_bias(bias, attrs.out_channels)?;
    match (input.dtype(), weights.dtype()) {
        (DType::F32, DType::F32) => conv_f32(input, weights, bias, &geo, epilogue),
        (DType::I8, DType::I8) => conv_i8(input, weights, bias, &geo, epilogue),
        (a, b) => Err(Error::DType(format!("conv2d input {a} with weights {b}"))),
    }
}

fn conv_f32(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    geo: &Geometry,
    epi: &Epilogue,
) -> Result<Tensor> {
    if epi.output.is_some() {
        return Err(Error::DType("f32 convolution cannot emit quantized output".into()));
    }
    let mut out = accumulate(input.as_f32()?, weights.as_f32()?, geo);
    let cout = geo.output.c;
    let bias = bias.map(|b| b.as_f32()).transpose()?;
    for px in out.chunks_mut(cout) {
        if let Some(b) = bias {
            for (v, &bv) in px.iter_mut().zip(b) {
                *v += bv;
            }
        }
        if epi.relu {
            for v in px.iter_mut() {
                *v = relu_f32(*v);
            }
        }
    }
    Tensor::from_f32(geo.output, out)
}

#[inline]
pub(crate) fn relu_f32(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn input_qparams(t: &Tensor, what: &str) -> Result<QuantParams> {
    t.qparams()
        .ok_or_else(|| Error::MissingQParams(format!("{what} has no quantization parameters")))
}

/// Applies bias and the epilogue to i32 accumulators whose real value is
/// `acc · acc_scale`.
pub(crate) fn finish_i32(
    acc: Vec<i32>,
    bias: Option<&[i32]>,
    acc_scale: f64,
    shape: Shape,
    epi: &Epilogue,
) -> Result<Tensor> {
    let c = shape.c;
    match epi.output {
        Some(qo) => {
            let m = requant_multiplier_f64(acc_scale, qo.scale() as f64)?;
            let zp = qo.zero_point();
            let lo = if epi.relu { zp.max(-128) } else { -128 };
            let mut out = Vec::with_capacity(acc.len());
            for (i, a) in acc.into_iter().enumerate() {
                let a = match bias {
                    Some(b) => a.saturating_add(b[i % c]),
                    None => a,
                };
                let v = zp.saturating_add(m.apply(a)).clamp(lo, 127);
                out.push(v as i8);
            }
            Tensor::from_i8(shape, out, qo)
        }
        None => {
            let out = acc
                .into_iter()
                .enumerate()
                .map(|(i, a)| {
                    let a = a as i64 + bias.map_or(0, |b| b[i % c] as i64);
                    let v = (a as f64 * acc_scale) as f32;
                    if epi.relu {
                        relu_f32(v)
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::from_f32(shape, out)
        }
    }
}

fn requant_multiplier_f64(acc_scale: f64, out_scale: f64) -> Result<crate::tensor::Multiplier> {
    crate::tensor::Multiplier::from_real(acc_scale / out_scale).map_err(|_| {
        Error::MultiplierOutOfRange {
            multiplier: acc_scale / out_scale,
            context: format!("accumulator scale {acc_scale:e} → output scale {out_scale:e}"),
        }
    })
}

fn conv_i8(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    geo: &Geometry,
    epi: &Epilogue,
) -> Result<Tensor> {
    let qi = input_qparams(input, "conv2d input")?;
    let qw = input_qparams(weights, "conv2d weights")?;
    let acc_scale = qi.scale() as f64 * qw.scale() as f64;
    if let Some(qo) = epi.output {
        // Validate the multiplier up front so errors name the scales.
        requant_multiplier(qi.scale(), qw.scale(), qo.scale()).map_err(|_| {
            Error::MultiplierOutOfRange {
                multiplier: acc_scale / qo.scale() as f64,
                context: format!(
                    "s_in {:e} · s_w {:e} / s_out {:e}",
                    qi.scale(),
                    qw.scale(),
                    qo.scale()
                ),
            }
        })?;
    }
    let zp_in = qi.zero_point();
    let zp_w = qw.zero_point();
    let x: Vec<i32> = input.as_i8()?.iter().map(|&q| q as i32 - zp_in).collect();
    let w: Vec<i32> = weights.as_i8()?.iter().map(|&q| q as i32 - zp_w).collect();
    let acc = accumulate(&x, &w, geo);
    let bias = match bias {
        Some(b) if b.dtype() == DType::I32 => Some(b.as_i32()?),
        Some(b) => {
            return Err(Error::DType(format!("i8 convolution needs i32 bias, got {}", b.dtype())))
        }
        None => None,
    };
    finish_i32(acc, bias, acc_scale, geo.output, epi)
}

/// Fully connected layer on a flattened `N×1×1×K` input with `[1,1,K,M]`
/// weights.
pub fn dense(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    epilogue: &Epilogue,
) -> Result<Tensor> {
    let s = input.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Shape(format!("dense input {s} is not flattened to N×1×1×K")));
    }
    let ws = weights.shape();
    if ws.n != 1 || ws.h != 1 {
        return Err(Error::Shape(format!("dense weights {ws} must be 1×1×K×M")));
    }
    if ws.w != s.c {
        return Err(Error::Shape(format!(
            "dense inner dimension mismatch: input K={} but weights K={}",
            s.c, ws.w
        )));
    }
    let attrs = ConvAttrs::new(1, 1, Padding::Valid, ws.c);
    conv2d(input, weights, bias, &attrs, epilogue)
}
