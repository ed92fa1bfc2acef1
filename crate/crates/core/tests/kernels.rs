mod common;

use common::cases::{run_case, KERNELS};
use common::*;
use fundus_core::ops::{self, ConvAttrs, DwSepParams, Epilogue, FireAttrs, FireParams, Padding};
use fundus_core::tensor::Shape;

#[test]
fn randomized_kernels_match_oracles() {
    for (k, name) in KERNELS.iter().enumerate() {
        let mut r = rng(1000 + k as u64);
        for case in 0..40 {
            let res = run_case(name, &mut r);
            assert!(res.f32_error <= 1e-5, "{name} case {case}: f32 error {}", res.f32_error);
            if let Some(u) = res.i8_units {
                assert!(u <= 1, "{name} case {case}: {u} units off");
            }
        }
    }
}

#[test]
fn strided_same_conv_against_brute_force() {
    let mut r = rng(7);
    let xs = Shape::new(1, 8, 8, 4);
    let ws = Shape::new(3, 3, 4, 6);
    let x = f32_tensor(&mut r, xs, -1.0, 1.0);
    let w = f32_tensor(&mut r, ws, -1.0, 1.0);
    let attrs = ConvAttrs::new(3, 2, Padding::Same, 6);
    let got = ops::conv2d(&x, &w, None, &attrs, &Epilogue::NONE).unwrap();
    let (want, os) = conv(&reals(&x), xs, &reals(&w), None, &attrs, false);
    assert_eq!(os, Shape::new(1, 4, 4, 6));
    assert_eq!(got.shape(), os);
    assert!(max_abs_diff(&reals(&got), &want) < 1e-5);

    let qx = quantize_with(x.as_f32().unwrap(), xs, asymmetric(-1.0, 1.0));
    let qw = quantize_symmetric(w.as_f32().unwrap(), ws);
    let (want, _) = conv(&reals(&qx), xs, &reals(&qw), None, &attrs, false);
    let qo = output_params(&want, (qx.qparams().unwrap().scale() * qw.qparams().unwrap().scale()) as f64);
    let got = ops::conv2d(&qx, &qw, None, &attrs, &Epilogue::NONE.with_output(Some(qo))).unwrap();
    assert!(unit_error(&got, &want) <= 1);
}

#[test]
fn dwsep_block_equals_unfused_sequence() {
    let mut r = rng(11);
    let xs = Shape::new(1, 9, 7, 5);
    let x = f32_tensor(&mut r, xs, -1.0, 1.0);
    let dw = f32_tensor(&mut r, Shape::new(3, 3, 1, 5), -0.5, 0.5);
    let db = f32_tensor(&mut r, Shape::vector(5), -0.1, 0.1);
    let pw = f32_tensor(&mut r, Shape::new(1, 1, 5, 8), -0.5, 0.5);
    let pb = f32_tensor(&mut r, Shape::vector(8), -0.1, 0.1);
    let params = DwSepParams { dw_weights: &dw, dw_bias: Some(&db), pw_weights: &pw, pw_bias: Some(&pb) };
    let fused = ops::dwsep_block(&x, &params, 2, None, None).unwrap();

    let mid = ops::conv2d(&x, &dw, Some(&db), &ConvAttrs::depthwise(3, 2, 5), &Epilogue::NONE).unwrap();
    let mid = ops::relu(&mid).unwrap();
    let out = ops::conv2d(&mid, &pw, Some(&pb), &ConvAttrs::new(1, 1, Padding::Valid, 8), &Epilogue::NONE).unwrap();
    assert_eq!(fused, ops::relu(&out).unwrap());
}

#[test]
fn fire_equals_composed_primitives() {
    let mut r = rng(12);
    let xs = Shape::new(1, 6, 5, 4);
    let a = FireAttrs::new(2, 3, 3);
    let x = f32_tensor(&mut r, xs, -1.0, 1.0);
    let sq = f32_tensor(&mut r, Shape::new(1, 1, 4, 2), -0.5, 0.5);
    let e1 = f32_tensor(&mut r, Shape::new(1, 1, 2, 3), -0.5, 0.5);
    let e3 = f32_tensor(&mut r, Shape::new(3, 3, 2, 3), -0.5, 0.5);
    let params = FireParams {
        squeeze_weights: &sq,
        squeeze_bias: None,
        expand1_weights: &e1,
        expand1_bias: None,
        expand3_weights: &e3,
        expand3_bias: None,
    };
    let fused = ops::fire(&x, &params, &a, None, None).unwrap();
    assert_eq!(fused.shape(), Shape::new(1, 6, 5, 6));

    let s = ops::relu(&ops::conv2d(&x, &sq, None, &ConvAttrs::new(1, 1, Padding::Valid, 2), &Epilogue::NONE).unwrap()).unwrap();
    let o1 = ops::relu(&ops::conv2d(&s, &e1, None, &ConvAttrs::new(1, 1, Padding::Valid, 3), &Epilogue::NONE).unwrap()).unwrap();
    let o3 = ops::relu(&ops::conv2d(&s, &e3, None, &ConvAttrs::new(3, 1, Padding::Same, 3), &Epilogue::NONE).unwrap()).unwrap();
    let want = concat(o1.as_f32().unwrap().iter().map(|&v| v as f64).collect::<Vec<_>>().as_slice(), 3, &reals(&o3), 3);
    assert_eq!(reals(&fused), want);

    let zeros = fundus_core::Tensor::zeros_f32(xs);
    assert!(ops::fire(&zeros, &params, &a, None, None).unwrap().as_f32().unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn i8_gap_within_one_unit_of_rational_mean() {
    let mut r = rng(13);
    for _ in 0..50 {
        let res = run_case("global_avg_pool", &mut r);
        assert!(res.i8_units.unwrap() <= 1);
    }
}
