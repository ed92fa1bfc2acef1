//! Reference implementations used as test oracles. Everything here is
//! written as plain nested loops in f64 and shares no code with the kernels.
#![allow(dead_code)]

pub mod cases;
pub mod graphs;

use fundus_core::ops::{ConvAttrs, Padding};
use fundus_core::tensor::{QuantParams, Shape, Tensor, TensorData};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

pub fn f32_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_f32(shape, uniform(rng, shape.numel(), lo, hi)).unwrap()
}

/// Real values of a tensor: f32 as is, i8 and i32 through their affine map.
pub fn reals(t: &Tensor) -> Vec<f64> {
    match t.data() {
        TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        TensorData::I8(v) => {
            let qp = t.qparams().unwrap();
            v.iter()
                .map(|&q| (q as f64 - qp.zero_point() as f64) * qp.scale() as f64)
                .collect()
        }
        TensorData::I32(v) => {
            let s = t.qparams().map_or(1.0, |q| q.scale() as f64);
            v.iter().map(|&q| q as f64 * s).collect()
        }
    }
}

/// Affine INT8 code for a real value, rounding half away from zero.
pub fn code(v: f64, qp: QuantParams) -> i32 {
    ((v / qp.scale() as f64).round() + qp.zero_point() as f64).clamp(-128.0, 127.0) as i32
}

/// Largest |kernel code − code(oracle value)|.
pub fn unit_error(kernel: &Tensor, oracle: &[f64]) -> i32 {
    let qp = kernel.qparams().unwrap();
    let k = kernel.as_i8().unwrap();
    assert_eq!(k.len(), oracle.len());
    k.iter()
        .zip(oracle)
        .map(|(&q, &o)| (q as i32 - code(o, qp)).abs())
        .max()
        .unwrap_or(0)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn asymmetric(min: f64, max: f64) -> QuantParams {
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    if hi == lo {
        return QuantParams::new(1.0, 0).unwrap();
    }
    let scale = (hi - lo) / 255.0;
    let zp = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
    QuantParams::new(scale as f32, zp).unwrap()
}

pub fn symmetric(absmax: f64) -> QuantParams {
    if absmax == 0.0 {
        return QuantParams::new(1.0, 0).unwrap();
    }
    QuantParams::new((absmax / 127.0) as f32, 0).unwrap()
}

pub fn quantize_with(values: &[f32], shape: Shape, qp: QuantParams) -> Tensor {
    let codes = values.iter().map(|&v| code(v as f64, qp) as i8).collect();
    Tensor::from_i8(shape, codes, qp).unwrap()
}

pub fn quantize_symmetric(values: &[f32], shape: Shape) -> Tensor {
    let m = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    quantize_with(values, shape, symmetric(m))
}

pub fn quantize_bias(b: &[f32], s_in: f32, s_w: f32) -> Tensor {
    let s = s_in as f64 * s_w as f64;
    let codes = b.iter().map(|&v| (v as f64 / s).round() as i32).collect();
    Tensor::from_i32(Shape::vector(b.len()), codes, Some(QuantParams::new(s as f32, 0).unwrap())).unwrap()
}

/// Output parameters covering `oracle`, widened if needed so the
/// requantization multiplier `acc_scale / s_out` stays below one.
pub fn output_params(oracle: &[f64], acc_scale: f64) -> QuantParams {
    let min = oracle.iter().copied().fold(f64::INFINITY, f64::min);
    let max = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let qp = asymmetric(min, max);
    if acc_scale / qp.scale() as f64 >= 0.99 {
        let s = acc_scale * 4.0;
        let zp = (-128.0 - min.min(0.0) / s).round().clamp(-128.0, 127.0) as i32;
        return QuantParams::new(s as f32, zp).unwrap();
    }
    qp
}

/// Output extent along one axis.
pub fn out_extent(input: usize, k: usize, s: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (input - k) / s + 1,
        Padding::Same => (input + s - 1) / s,
    }
}

fn leading_pad(input: usize, out: usize, k: usize, s: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((out - 1) * s + k).saturating_sub(input) / 2,
    }
}

/// Brute-force grouped convolution on real values.
pub fn conv(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    bias: Option<&[f64]>,
    attrs: &ConvAttrs,
    relu: bool,
) -> (Vec<f64>, Shape) {
    let (kh, kw) = attrs.kernel;
    let (sh, sw) = attrs.stride;
    let oh = out_extent(xs.h, kh, sh, attrs.padding);
    let ow = out_extent(xs.w, kw, sw, attrs.padding);
    let pt = leading_pad(xs.h, oh, kh, sh, attrs.padding) as isize;
    let pl = leading_pad(xs.w, ow, kw, sw, attrs.padding) as isize;
    let cout = attrs.out_channels;
    let cin_g = xs.c / attrs.groups;
    let cout_g = cout / attrs.groups;
    let os = Shape::new(xs.n, oh, ow, cout);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let g = oc / cout_g;
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - pt;
                            let ix = (ox * sw + kx) as isize - pl;
                            if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                continue;
                            }
                            for ic in 0..cin_g {
                                let xi = ((n * xs.h + iy as usize) * xs.w + ix as usize) * xs.c + g * cin_g + ic;
                                let wi = ((ky * kw + kx) * cin_g + ic) * cout + oc;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    if relu {
                        acc = acc.max(0.0);
                    }
                    out[((n * oh + oy) * ow + ox) * cout + oc] = acc;
                }
            }
        }
    }
    (out, os)
}

/// `y[m] = b[m] + Σ_k x[k]·W[k][m]` for every row of `x`.
pub fn dense(x: &[f64], k: usize, w: &[f64], m: usize, bias: Option<&[f64]>, relu: bool) -> Vec<f64> {
    let rows = x.len() / k;
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        for j in 0..m {
            let mut acc = bias.map_or(0.0, |b| b[j]);
            for i in 0..k {
                acc += x[r * k + i] * w[i * m + j];
            }
            out.push(if relu { acc.max(0.0) } else { acc });
        }
    }
    out
}

pub fn maxpool(x: &[f64], xs: Shape, win: (usize, usize), stride: (usize, usize)) -> (Vec<f64>, Shape) {
    let oh = (xs.h - win.0) / stride.0 + 1;
    let ow = (xs.w - win.1) / stride.1 + 1;
    let os = Shape::new(xs.n, oh, ow, xs.c);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..xs.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..xs.c {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..win.0 {
                        for kx in 0..win.1 {
                            let i = ((n * xs.h + oy * stride.0 + ky) * xs.w + ox * stride.1 + kx) * xs.c + c;
                            m = m.max(x[i]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (out, os)
}

pub fn global_mean(x: &[f64], xs: Shape) -> Vec<f64> {
    let hw = xs.h * xs.w;
    let mut out = vec![0.0; xs.n * xs.c];
    for n in 0..xs.n {
        for p in 0..hw {
            for c in 0..xs.c {
                out[n * xs.c + c] += x[(n * hw + p) * xs.c + c];
            }
        }
    }
    out.iter().map(|s| s / hw as f64).collect()
}

/// Channel permutation by explicitly materialising the `(g, C/g)` grid,
/// transposing it and reading it back row-major.
pub fn shuffle(x: &[f64], c: usize, g: usize) -> Vec<f64> {
    let per = c / g;
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks(c) {
        let grid: Vec<Vec<f64>> = (0..g).map(|r| px[r * per..(r + 1) * per].to_vec()).collect();
        for col in 0..per {
            for row in &grid {
                out.push(row[col]);
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.chunks(ca).zip(b.chunks(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    out
}

/// Inference batch norm applied after the fact, per channel.
pub fn batchnorm(y: &mut [f64], c: usize, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) {
    for px in y.chunks_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let inv = 1.0 / (var[k] as f64 + eps as f64).sqrt();
            *v = (*v - mean[k] as f64) * inv * gamma[k] as f64 + beta[k] as f64;
        }
    }
}
