use super::conv::{finish_i32, input_qparams, output_dim};
use super::{Epilogue, Padding};
use crate::error::{Error, Result};
use crate::tensor::{DType, QuantParams, Shape, Tensor, TensorData};

pub fn maxpool_output_shape(input: Shape, window: (usize, usize), stride: (usize, usize)) -> Result<Shape> {
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidAttr("pool window must be non-empty".into()));
    }
    let (oh, _) = output_dim(input.h, window.0, stride.0, Padding::Valid)
        .map_err(|_| Error::Shape(format!("pool window {}×{} exceeds input {input}", window.0, window.1)))?;
    let (ow, _) = output_dim(input.w, window.1, stride.1, Padding::Valid)
        .map_err(|_| Error::Shape(format!("pool window {}×{} exceeds input {input}", window.0, window.1)))?;
    Ok(Shape::new(input.n, oh, ow, input.c))
}

fn maxpool_generic<T: Copy + PartialOrd>(
    x: &[T],
    input: Shape,
    output: Shape,
    window: (usize, usize),
    stride: (usize, usize),
) -> Vec<T> {
    let c = input.c;
    let mut out = Vec::with_capacity(output.numel());
    for b in 0..output.n {
        for oy in 0..output.h {
            for ox in 0..output.w {
                let first = ((b * input.h + oy * stride.0) * input.w + ox * stride.1) * c;
                let start = out.len();
                out.extend_from_slice(&x[first..first + c]);
                for ky in 0..window.0 {
                    for kx in 0..window.1 {
                        let base =
                            ((b * input.h + oy * stride.0 + ky) * input.w + ox * stride.1 + kx) * c;
                        for (m, &v) in out[start..].iter_mut().zip(&x[base..base + c]) {
                            if v > *m {
                                *m = v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Channelwise maximum over valid windows. INT8 inputs keep their
/// quantization parameters since the max commutes with a positive affine map.
pub fn maxpool2d(input: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidAttr("pool stride must be positive".into()));
    }
    let s = input.shape();
    let os = maxpool_output_shape(s, window, stride)?;
    match input.data() {
        TensorData::F32(x) => Tensor::from_f32(os, maxpool_generic(x, s, os, window, stride)),
        TensorData::I8(x) => Tensor::from_i8(
            os,
            maxpool_generic(x, s, os, window, stride),
            input_qparams(input, "maxpool input")?,
        ),
        TensorData::I32(_) => Err(Error::DType("maxpool on i32 tensor".into())),
    }
}

/// Per-channel spatial mean, producing `N×1×1×C`.
///
/// On INT8 input the sum is kept in i32 and requantized with
/// `M = s_in / (s_out · h · w)`; with no output parameters the mean is
/// emitted as f32.
pub fn global_avg_pool(input: &Tensor, output: Option<QuantParams>) -> Result<Tensor> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("global average pool over empty plane {s}")));
    }
    let os = Shape::new(s.n, 1, 1, s.c);
    let hw = s.h * s.w;
    match input.dtype() {
        DType::F32 => {
            if output.is_some() {
                return Err(Error::DType("f32 pooling cannot emit quantized output".into()));
            }
            let x = input.as_f32()?;
            let mut out = Vec::with_capacity(os.numel());
            for b in 0..s.n {
                let mut acc = vec![0.0f32; s.c];
                for p in 0..hw {
                    let base = (b * hw + p) * s.c;
                    for (a, &v) in acc.iter_mut().zip(&x[base..base + s.c]) {
                        *a += v;
                    }
                }
                out.extend(acc.into_iter().map(|a| a / hw as f32));
            }
            Tensor::from_f32(os, out)
        }
        DType::I8 => {
            let qi = input_qparams(input, "global average pool input")?;
            let zp = qi.zero_point();
            let x = input.as_i8()?;
            let mut acc = vec![0i32; os.numel()];
            for b in 0..s.n {
                let a = &mut acc[b * s.c..(b + 1) * s.c];
                for p in 0..hw {
                    let base = (b * hw + p) * s.c;
                    for (av, &q) in a.iter_mut().zip(&x[base..base + s.c]) {
                        *av += q as i32 - zp;
                    }
                }
            }
            let acc_scale = qi.scale() as f64 / hw as f64;
            finish_i32(acc, None, acc_scale, os, &Epilogue::NONE.with_output(output))
        }
        DType::I32 => Err(Error::DType("global average pool on i32 tensor".into())),
    }
}
