use super::{conv2d, fold_batchnorm, BatchNormParams, ConvAttrs, Epilogue, FireAttrs, Padding};
use crate::error::{Error, Result};
use crate::tensor::{QuantParams, Shape, Tensor, TensorData};

/// Weights of a depthwise-separable block, already batch-norm folded.
#[derive(Debug, Clone, Copy)]
pub struct DwSepParams<'a> {
    /// `[3, 3, 1, C]`
    pub dw_weights: &'a Tensor,
    pub dw_bias: Option<&'a Tensor>,
    /// `[1, 1, C, C_out]`
    pub pw_weights: &'a Tensor,
    pub pw_bias: Option<&'a Tensor>,
}

/// Depthwise 3×3 (same padding) → ReLU → pointwise 1×1 → ReLU.
///
/// Returns the depthwise output alongside the block output so calibration
/// can observe the intermediate activation.
pub fn dwsep_block_traced(
    input: &Tensor,
    params: &DwSepParams<'_>,
    stride: usize,
    inner: Option<QuantParams>,
    output: Option<QuantParams>,
) -> Result<(Tensor, Tensor)> {
    let c = input.shape().c;
    let dws = params.dw_weights.shape();
    if dws.w != 1 || dws.c != c {
        return Err(Error::Shape(format!(
            "depthwise weights {dws} do not match {c} input channels (groups = in_channels)"
        )));
    }
    let pws = params.pw_weights.shape();
    if pws.n != 1 || pws.h != 1 {
        return Err(Error::Shape(format!("pointwise weights {pws} must be 1×1")));
    }
    let dw_attrs = ConvAttrs {
        kernel: (dws.n, dws.h),
        stride: (stride, stride),
        padding: Padding::Same,
        groups: c,
        out_channels: c,
    };
    let mid = conv2d(input, params.dw_weights, params.dw_bias, &dw_attrs, &Epilogue {
        relu: true,
        output: inner,
    })?;
    let pw_attrs = ConvAttrs::new(1, 1, Padding::Valid, pws.c);
    let out = conv2d(&mid, params.pw_weights, params.pw_bias, &pw_attrs, &Epilogue {
        relu: true,
        output,
    })?;
    Ok((mid, out))
}

pub fn dwsep_block(
    input: &Tensor,
    params: &DwSepParams<'_>,
    stride: usize,
    inner: Option<QuantParams>,
    output: Option<QuantParams>,
) -> Result<Tensor> {
    dwsep_block_traced(input, params, stride, inner, output).map(|(_, out)| out)
}

/// f32 depthwise-separable block with raw batch-norm statistics; the
/// statistics are folded first, then the fused block runs.
pub fn depthwise_separable_block(
    input: &Tensor,
    dw_weights: &Tensor,
    pw_weights: &Tensor,
    bn_dw: &BatchNormParams,
    bn_pw: &BatchNormParams,
    stride: usize,
) -> Result<Tensor> {
    let (dw_w, dw_b) = fold_batchnorm(dw_weights, None, bn_dw)?;
    let (pw_w, pw_b) = fold_batchnorm(pw_weights, None, bn_pw)?;
    dwsep_block(
        input,
        &DwSepParams {
            dw_weights: &dw_w,
            dw_bias: Some(&dw_b),
            pw_weights: &pw_w,
            pw_bias: Some(&pw_b),
        },
        stride,
        None,
        None,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct FireParams<'a> {
    pub squeeze_weights: &'a Tensor,
    pub squeeze_bias: Option<&'a Tensor>,
    pub expand1_weights: &'a Tensor,
    pub expand1_bias: Option<&'a Tensor>,
    pub expand3_weights: &'a Tensor,
    pub expand3_bias: Option<&'a Tensor>,
}

/// Squeeze 1×1 → ReLU, then 1×1 and 3×3 expands (each ReLU) concatenated
/// along channels. Both expand branches share `output` so the concat needs
/// no rescaling. Returns the squeeze activation as well.
pub fn fire_traced(
    input: &Tensor,
    params: &FireParams<'_>,
    attrs: &FireAttrs,
    inner: Option<QuantParams>,
    output: Option<QuantParams>,
) -> Result<(Tensor, Tensor)> {
    let check = |w: &Tensor, k: usize, out: usize, what: &str| -> Result<()> {
        let s = w.shape();
        if s.n != k || s.h != k || s.c != out {
            return Err(Error::Shape(format!(
                "fire {what} weights {s}, expected {k}×{k}×?×{out}"
            )));
        }
        Ok(())
    };
    check(params.squeeze_weights, 1, attrs.squeeze_channels, "squeeze")?;
    check(params.expand1_weights, 1, attrs.expand1_channels, "expand1")?;
    check(params.expand3_weights, 3, attrs.expand3_channels, "expand3")?;

    let squeeze = conv2d(
        input,
        params.squeeze_weights,
        params.squeeze_bias,
        &ConvAttrs::new(1, 1, Padding::Valid, attrs.squeeze_channels),
        &Epilogue { relu: true, output: inner },
    )?;
    let epi = Epilogue { relu: true, output };
    let e1 = conv2d(
        &squeeze,
        params.expand1_weights,
        params.expand1_bias,
        &ConvAttrs::new(1, 1, Padding::Valid, attrs.expand1_channels),
        &epi,
    )?;
    let e3 = conv2d(
        &squeeze,
        params.expand3_weights,
        params.expand3_bias,
        &ConvAttrs::new(3, 1, Padding::Same, attrs.expand3_channels),
        &epi,
    )?;
    let out = concat_channels(&e1, &e3)?;
    Ok((squeeze, out))
}

pub fn fire(
    input: &Tensor,
    params: &FireParams<'_>,
    attrs: &FireAttrs,
    inner: Option<QuantParams>,
    output: Option<QuantParams>,
) -> Result<Tensor> {
    fire_traced(input, params, attrs, inner, output).map(|(_, out)| out)
}

/// Concatenates two tensors with equal N/H/W along channels. Quantized
/// inputs must share parameters.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::Shape(format!("cannot concat {sa} with {sb}")));
    }
    if a.qparams() != b.qparams() {
        return Err(Error::InvalidQParams("concat branches have different qparams".into()));
    }
    fn interleave<T: Copy>(x: &[T], ca: usize, y: &[T], cb: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len() + y.len());
        for (px, py) in x.chunks_exact(ca).zip(y.chunks_exact(cb)) {
            out.extend_from_slice(px);
            out.extend_from_slice(py);
        }
        out
    }
    let shape = Shape::new(sa.n, sa.h, sa.w, sa.c + sb.c);
    let data = match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => TensorData::F32(interleave(x, sa.c, y, sb.c)),
        (TensorData::I8(x), TensorData::I8(y)) => TensorData::I8(interleave(x, sa.c, y, sb.c)),
        _ => return Err(Error::DType("concat of mismatched dtypes".into())),
    };
    Tensor::new(shape, data, a.qparams())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(shape: Shape, v: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape, v).unwrap()
    }

    #[test]
    fn dwsep_per_channel_scaling() {
        let x = f(Shape::new(1, 2, 2, 2), vec![1., 1., 2., 2., 3., 3., 4., 4.]);
        // 1×1 depthwise kernels [2, 3], identity pointwise
        let dw = f(Shape::new(1, 1, 1, 2), vec![2.0, 3.0]);
        let pw = f(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]);
        let bn = BatchNormParams::identity(2, 0.0);
        let y = depthwise_separable_block(&x, &dw, &pw, &bn, &bn, 1).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[2., 3., 4., 6., 6., 9., 8., 12.]);

        let z = depthwise_separable_block(&Tensor::zeros_f32(x.shape()), &dw, &pw, &bn, &bn, 1).unwrap();
        assert!(z.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fire_shapes() {
        let x = f(Shape::new(1, 5, 5, 4), vec![0.0; 100]);
        let sq = f(Shape::new(1, 1, 4, 2), vec![0.1; 8]);
        let e1 = f(Shape::new(1, 1, 2, 3), vec![0.1; 6]);
        let e3 = f(Shape::new(3, 3, 2, 3), vec![0.1; 54]);
        let p = FireParams {
            squeeze_weights: &sq,
            squeeze_bias: None,
            expand1_weights: &e1,
            expand1_bias: None,
            expand3_weights: &e3,
            expand3_bias: None,
        };
        let attrs = FireAttrs::new(2, 3, 3);
        let y = fire(&x, &p, &attrs, None, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 5, 6));
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));

        let bad = FireAttrs::new(2, 4, 3);
        assert!(fire(&x, &p, &bad, None, None).is_err());
    }

    #[test]
    fn concat_interleaves_pixels() {
        let a = f(Shape::new(1, 1, 2, 1), vec![1.0, 2.0]);
        let b = f(Shape::new(1, 1, 2, 2), vec![10.0, 11.0, 20.0, 21.0]);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }
}
