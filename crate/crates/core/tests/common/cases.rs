//! Randomized kernel cases drawn from the shapes the builders emit. Each
//! case runs the f32 kernel against an oracle and, where the kernel has an
//! INT8 path, the i8 kernel against the quantized oracle.
#![allow(dead_code)]

use fundus_core::ops::{self, BatchNormParams, ConvAttrs, DwSepParams, Epilogue, FireAttrs, FireParams, Padding};
use fundus_core::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    /// Largest absolute f32 deviation from the oracle.
    pub f32_error: f64,
    /// Largest i8 deviation in output units; `None` for f32-only kernels.
    pub i8_units: Option<i32>,
}

pub const KERNELS: [&str; 11] = [
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "dwsep_block",
    "fire",
    "maxpool2d",
    "global_avg_pool",
    "channel_shuffle",
    "relu",
    "softmax",
    "fold_batchnorm",
];

pub fn run_case(kernel: &str, rng: &mut ChaCha8Rng) -> CaseResult {
    match kernel {
        "conv2d" => conv_case(rng, false),
        "depthwise_conv2d" => conv_case(rng, true),
        "dense" => dense_case(rng),
        "dwsep_block" => dwsep_case(rng),
        "fire" => fire_case(rng),
        "maxpool2d" => maxpool_case(rng),
        "global_avg_pool" => gap_case(rng),
        "channel_shuffle" => shuffle_case(rng),
        "relu" => relu_case(rng),
        "softmax" => softmax_case(rng),
        "fold_batchnorm" => batchnorm_case(rng),
        other => panic!("unknown kernel {other}"),
    }
}

/// Activations either post-normalisation/ReLU (non-negative) or signed.
fn activation(rng: &mut ChaCha8Rng, shape: Shape) -> Vec<f32> {
    let lo = if rng.gen_bool(0.5) { 0.0 } else { -1.0 };
    uniform(rng, shape.numel(), lo, 1.0)
}

fn f32_of(values: &[f32], shape: Shape) -> Tensor {
    Tensor::from_f32(shape, values.to_vec()).unwrap()
}

fn input_params(values: &[f32]) -> fundus_core::QuantParams {
    let min = values.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    asymmetric(min, max)
}

/// Runs one convolution in f32 and i8 and compares both against `conv`.
fn check_conv(
    rng: &mut ChaCha8Rng,
    xs: Shape,
    attrs: ConvAttrs,
    relu: bool,
) -> CaseResult {
    let ws = Shape::new(attrs.kernel.0, attrs.kernel.1, xs.c / attrs.groups, attrs.out_channels);
    let x = activation(rng, xs);
    let w = uniform(rng, ws.numel(), -0.25, 0.25);
    let b = uniform(rng, attrs.out_channels, -0.1, 0.1);

    let got = ops::conv2d(&f32_of(&x, xs), &f32_of(&w, ws), Some(&f32_of(&b, Shape::vector(b.len()))), &attrs, &Epilogue::relu(relu))
        .unwrap();
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let (want, os) = conv(&to64(&x), xs, &to64(&w), Some(&to64(&b)), &attrs, relu);
    assert_eq!(got.shape(), os);
    let f32_error = max_abs_diff(&reals(&got), &want);

    let qx = quantize_with(&x, xs, input_params(&x));
    let qw = quantize_symmetric(&w, ws);
    let (s_in, s_w) = (qx.qparams().unwrap().scale(), qw.qparams().unwrap().scale());
    let qb = quantize_bias(&b, s_in, s_w);
    let (want, _) = conv(&reals(&qx), xs, &reals(&qw), Some(&reals(&qb)), &attrs, relu);
    let qo = output_params(&want, s_in as f64 * s_w as f64);
    let got = ops::conv2d(&qx, &qw, Some(&qb), &attrs, &Epilogue { relu, output: Some(qo) }).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &want)) }
}

fn conv_case(rng: &mut ChaCha8Rng, depthwise: bool) -> CaseResult {
    let k = *[1usize, 3, 3, 5].choose(rng).unwrap();
    let stride = rng.gen_range(1..=2);
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (cin, cout, groups) = if depthwise {
        let c = rng.gen_range(1..=24);
        (c, c, c)
    } else if rng.gen_bool(0.5) {
        (*[1usize, 3, 6, 8, 12, 16, 24].choose(rng).unwrap(), rng.gen_range(1..=24), 1)
    } else {
        let g = rng.gen_range(2..=4);
        (g * rng.gen_range(1..=6), g * rng.gen_range(1..=6), g)
    };
    let h = rng.gen_range(k..=k + 9);
    let w = rng.gen_range(k..=k + 9);
    let attrs = ConvAttrs {
        kernel: (k, k),
        stride: (stride, stride),
        padding,
        groups,
        out_channels: cout,
    };
    let relu = rng.gen_bool(0.5);
    check_conv(rng, Shape::new(1, h, w, cin), attrs, relu)
}

fn dense_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let k = rng.gen_range(1..=96);
    let m = rng.gen_range(1..=16);
    let n = rng.gen_range(1..=2);
    let relu = rng.gen_bool(0.5);
    let xs = Shape::new(n, 1, 1, k);
    let ws = Shape::new(1, 1, k, m);
    let x = activation(rng, xs);
    let w = uniform(rng, k * m, -0.25, 0.25);
    let b = uniform(rng, m, -0.1, 0.1);
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();

    let got = ops::dense(&f32_of(&x, xs), &f32_of(&w, ws), Some(&f32_of(&b, Shape::vector(m))), &Epilogue::relu(relu))
        .unwrap();
    let want = dense(&to64(&x), k, &to64(&w), m, Some(&to64(&b)), relu);
    let f32_error = max_abs_diff(&reals(&got), &want);

    let qx = quantize_with(&x, xs, input_params(&x));
    let qw = quantize_symmetric(&w, ws);
    let (s_in, s_w) = (qx.qparams().unwrap().scale(), qw.qparams().unwrap().scale());
    let qb = quantize_bias(&b, s_in, s_w);
    let want = dense(&reals(&qx), k, &reals(&qw), m, Some(&reals(&qb)), relu);
    let qo = output_params(&want, s_in as f64 * s_w as f64);
    let got = ops::dense(&qx, &qw, Some(&qb), &Epilogue { relu, output: Some(qo) }).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &want)) }
}

fn dwsep_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let c = rng.gen_range(1..=16);
    let cout = rng.gen_range(1..=24);
    let stride = rng.gen_range(1..=2);
    let xs = Shape::new(1, rng.gen_range(3..=10), rng.gen_range(3..=10), c);
    let dws = Shape::new(3, 3, 1, c);
    let pws = Shape::new(1, 1, c, cout);
    let x = activation(rng, xs);
    let dw = uniform(rng, dws.numel(), -0.5, 0.5);
    let db = uniform(rng, c, -0.1, 0.1);
    let pw = uniform(rng, pws.numel(), -0.25, 0.25);
    let pb = uniform(rng, cout, -0.1, 0.1);
    let dw_attrs = ConvAttrs::depthwise(3, stride, c);
    let pw_attrs = ConvAttrs::new(1, 1, Padding::Valid, cout);
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();

    let (dwt, dbt, pwt, pbt) = (f32_of(&dw, dws), f32_of(&db, Shape::vector(c)), f32_of(&pw, pws), f32_of(&pb, Shape::vector(cout)));
    let params = DwSepParams { dw_weights: &dwt, dw_bias: Some(&dbt), pw_weights: &pwt, pw_bias: Some(&pbt) };
    let (_, got) = ops::dwsep_block_traced(&f32_of(&x, xs), &params, stride, None, None).unwrap();
    let (mid, ms) = conv(&to64(&x), xs, &to64(&dw), Some(&to64(&db)), &dw_attrs, true);
    let (want, _) = conv(&mid, ms, &to64(&pw), Some(&to64(&pb)), &pw_attrs, true);
    let f32_error = max_abs_diff(&reals(&got), &want);

    let qx = quantize_with(&x, xs, input_params(&x));
    let s_in = qx.qparams().unwrap().scale();
    let qdw = quantize_symmetric(&dw, dws);
    let s_dw = qdw.qparams().unwrap().scale();
    let qdb = quantize_bias(&db, s_in, s_dw);
    let (mid_want, ms) = conv(&reals(&qx), xs, &reals(&qdw), Some(&reals(&qdb)), &dw_attrs, true);
    let q_mid = output_params(&mid_want, s_in as f64 * s_dw as f64);
    let qpw = quantize_symmetric(&pw, pws);
    let s_pw = qpw.qparams().unwrap().scale();
    let qpb = quantize_bias(&pb, q_mid.scale(), s_pw);
    // The pointwise stage is judged on the kernel's own intermediate, so an
    // inner rounding difference is not double counted.
    let mid_kernel = ops::conv2d(&qx, &qdw, Some(&qdb), &dw_attrs, &Epilogue { relu: true, output: Some(q_mid) }).unwrap();
    let (want, _) = conv(&reals(&mid_kernel), ms, &reals(&qpw), Some(&reals(&qpb)), &pw_attrs, true);
    let q_out = output_params(&want, q_mid.scale() as f64 * s_pw as f64);
    let params = DwSepParams { dw_weights: &qdw, dw_bias: Some(&qdb), pw_weights: &qpw, pw_bias: Some(&qpb) };
    let (mid, got) = ops::dwsep_block_traced(&qx, &params, stride, Some(q_mid), Some(q_out)).unwrap();
    let units = unit_error(&mid, &mid_want).max(unit_error(&got, &want));
    assert_eq!(mid, mid_kernel);
    CaseResult { f32_error, i8_units: Some(units) }
}

fn fire_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let c = rng.gen_range(1..=16);
    let a = FireAttrs::new(rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16));
    let xs = Shape::new(1, rng.gen_range(1..=8), rng.gen_range(1..=8), c);
    let sqs = Shape::new(1, 1, c, a.squeeze_channels);
    let e1s = Shape::new(1, 1, a.squeeze_channels, a.expand1_channels);
    let e3s = Shape::new(3, 3, a.squeeze_channels, a.expand3_channels);
    let x = activation(rng, xs);
    let sq = uniform(rng, sqs.numel(), -0.5, 0.5);
    let sqb = uniform(rng, a.squeeze_channels, -0.1, 0.1);
    let e1 = uniform(rng, e1s.numel(), -0.5, 0.5);
    let e1b = uniform(rng, a.expand1_channels, -0.1, 0.1);
    let e3 = uniform(rng, e3s.numel(), -0.25, 0.25);
    let e3b = uniform(rng, a.expand3_channels, -0.1, 0.1);
    let sq_attrs = ConvAttrs::new(1, 1, Padding::Valid, a.squeeze_channels);
    let e1_attrs = ConvAttrs::new(1, 1, Padding::Valid, a.expand1_channels);
    let e3_attrs = ConvAttrs::new(3, 1, Padding::Same, a.expand3_channels);
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let vector = |v: &[f32]| f32_of(v, Shape::vector(v.len()));

    let t = [f32_of(&sq, sqs), vector(&sqb), f32_of(&e1, e1s), vector(&e1b), f32_of(&e3, e3s), vector(&e3b)];
    let params = FireParams {
        squeeze_weights: &t[0],
        squeeze_bias: Some(&t[1]),
        expand1_weights: &t[2],
        expand1_bias: Some(&t[3]),
        expand3_weights: &t[4],
        expand3_bias: Some(&t[5]),
    };
    let got = ops::fire(&f32_of(&x, xs), &params, &a, None, None).unwrap();
    let (s, ss) = conv(&to64(&x), xs, &to64(&sq), Some(&to64(&sqb)), &sq_attrs, true);
    let (o1, _) = conv(&s, ss, &to64(&e1), Some(&to64(&e1b)), &e1_attrs, true);
    let (o3, _) = conv(&s, ss, &to64(&e3), Some(&to64(&e3b)), &e3_attrs, true);
    let want = concat(&o1, a.expand1_channels, &o3, a.expand3_channels);
    let f32_error = max_abs_diff(&reals(&got), &want);

    let qx = quantize_with(&x, xs, input_params(&x));
    let s_in = qx.qparams().unwrap().scale();
    let qsq = quantize_symmetric(&sq, sqs);
    let s_sq = qsq.qparams().unwrap().scale();
    let qsqb = quantize_bias(&sqb, s_in, s_sq);
    let (s_want, ss) = conv(&reals(&qx), xs, &reals(&qsq), Some(&reals(&qsqb)), &sq_attrs, true);
    let q_mid = output_params(&s_want, s_in as f64 * s_sq as f64);
    let mid_kernel = ops::conv2d(&qx, &qsq, Some(&qsqb), &sq_attrs, &Epilogue { relu: true, output: Some(q_mid) }).unwrap();
    let qe1 = quantize_symmetric(&e1, e1s);
    let qe3 = quantize_symmetric(&e3, e3s);
    let (s1, s3) = (qe1.qparams().unwrap().scale(), qe3.qparams().unwrap().scale());
    let qe1b = quantize_bias(&e1b, q_mid.scale(), s1);
    let qe3b = quantize_bias(&e3b, q_mid.scale(), s3);
    let m = reals(&mid_kernel);
    let (o1, _) = conv(&m, ss, &reals(&qe1), Some(&reals(&qe1b)), &e1_attrs, true);
    let (o3, _) = conv(&m, ss, &reals(&qe3), Some(&reals(&qe3b)), &e3_attrs, true);
    let want = concat(&o1, a.expand1_channels, &o3, a.expand3_channels);
    let q_out = output_params(&want, q_mid.scale() as f64 * s1.max(s3) as f64);
    let params = FireParams {
        squeeze_weights: &qsq,
        squeeze_bias: Some(&qsqb),
        expand1_weights: &qe1,
        expand1_bias: Some(&qe1b),
        expand3_weights: &qe3,
        expand3_bias: Some(&qe3b),
    };
    let (mid, got) = ops::fire_traced(&qx, &params, &a, Some(q_mid), Some(q_out)).unwrap();
    assert_eq!(mid, mid_kernel);
    let units = unit_error(&mid, &s_want).max(unit_error(&got, &want));
    CaseResult { f32_error, i8_units: Some(units) }
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let win = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let stride = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let xs = Shape::new(rng.gen_range(1..=2), rng.gen_range(win.0..=win.0 + 8), rng.gen_range(win.1..=win.1 + 8), rng.gen_range(1..=24));
    let x = activation(rng, xs);
    let got = ops::maxpool2d(&f32_of(&x, xs), win, stride).unwrap();
    let (want, os) = maxpool(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), xs, win, stride);
    assert_eq!(got.shape(), os);
    let f32_error = max_abs_diff(&reals(&got), &want);
    let qx = quantize_with(&x, xs, input_params(&x));
    let (want, _) = maxpool(&reals(&qx), xs, win, stride);
    let got = ops::maxpool2d(&qx, win, stride).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &want)) }
}

fn gap_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let xs = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=14), rng.gen_range(1..=14), rng.gen_range(1..=32));
    let x = activation(rng, xs);
    let got = ops::global_avg_pool(&f32_of(&x, xs), None).unwrap();
    let f32_error = max_abs_diff(&reals(&got), &global_mean(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), xs));

    // Exact rational mean of the codes, then the real value.
    let qx = quantize_with(&x, xs, input_params(&x));
    let qp = qx.qparams().unwrap();
    let hw = (xs.h * xs.w) as i64;
    let codes = qx.as_i8().unwrap();
    let mut want = Vec::new();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let sum: i64 = (0..xs.h * xs.w).map(|p| codes[(n * xs.h * xs.w + p) * xs.c + c] as i64).sum();
            let centred = sum - hw * qp.zero_point() as i64;
            want.push(centred as f64 / hw as f64 * qp.scale() as f64);
        }
    }
    let qo = output_params(&want, qp.scale() as f64 / hw as f64);
    let got = ops::global_avg_pool(&qx, Some(qo)).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &want)) }
}

fn shuffle_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let g = rng.gen_range(1..=8);
    let c = g * rng.gen_range(1..=8);
    let xs = Shape::new(1, rng.gen_range(1..=6), rng.gen_range(1..=6), c);
    let x = activation(rng, xs);
    let got = ops::channel_shuffle(&f32_of(&x, xs), g).unwrap();
    let f32_error = max_abs_diff(&reals(&got), &shuffle(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), c, g));
    let qx = quantize_with(&x, xs, input_params(&x));
    let got = ops::channel_shuffle(&qx, g).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &shuffle(&reals(&qx), c, g))) }
}

fn relu_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let xs = Shape::new(1, rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
    let x = uniform(rng, xs.numel(), -1.0, 1.0);
    let got = ops::relu(&f32_of(&x, xs)).unwrap();
    let want: Vec<f64> = x.iter().map(|&v| (v as f64).max(0.0)).collect();
    let f32_error = max_abs_diff(&reals(&got), &want);
    let qx = quantize_with(&x, xs, input_params(&x));
    let want: Vec<f64> = reals(&qx).iter().map(|v| v.max(0.0)).collect();
    let got = ops::relu(&qx).unwrap();
    CaseResult { f32_error, i8_units: Some(unit_error(&got, &want)) }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let n = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=10);
    let xs = Shape::new(n, 1, 1, c);
    let x = uniform(rng, xs.numel(), -20.0, 20.0);
    let got = reals(&ops::softmax(&f32_of(&x, xs)).unwrap());
    let want: Vec<f64> = x.chunks(c).flat_map(|r| softmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect();
    CaseResult { f32_error: max_abs_diff(&got, &want), i8_units: None }
}

fn batchnorm_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let k = *[1usize, 3].choose(rng).unwrap();
    let cin = rng.gen_range(1..=12);
    let cout = rng.gen_range(1..=12);
    let xs = Shape::new(1, rng.gen_range(k..=k + 6), rng.gen_range(k..=k + 6), cin);
    let ws = Shape::new(k, k, cin, cout);
    let attrs = ConvAttrs::new(k, rng.gen_range(1..=2), Padding::Same, cout);
    let x = activation(rng, xs);
    let w = uniform(rng, ws.numel(), -0.25, 0.25);
    let b = uniform(rng, cout, -0.1, 0.1);
    let bn = BatchNormParams {
        gamma: uniform(rng, cout, 0.5, 1.5),
        beta: uniform(rng, cout, -0.1, 0.1),
        moving_mean: uniform(rng, cout, -0.1, 0.1),
        moving_var: uniform(rng, cout, 0.5, 2.0),
        epsilon: 1e-3,
    };
    let (fw, fb) = ops::fold_batchnorm(&f32_of(&w, ws), Some(&f32_of(&b, Shape::vector(cout))), &bn).unwrap();
    let got = ops::conv2d(&f32_of(&x, xs), &fw, Some(&fb), &attrs, &Epilogue::NONE).unwrap();
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let (mut want, _) = conv(&to64(&x), xs, &to64(&w), Some(&to64(&b)), &attrs, false);
    batchnorm(&mut want, cout, &bn.gamma, &bn.beta, &bn.moving_mean, &bn.moving_var, bn.epsilon);
    CaseResult { f32_error: max_abs_diff(&reals(&got), &want), i8_units: None }
}
