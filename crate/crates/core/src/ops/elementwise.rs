use super::conv::relu_f32;
use super::BatchNormParams;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

/// `max(x, 0)`; on INT8 data the clamp is at the zero point, which is the
/// exact code for real zero.
pub fn relu(input: &Tensor) -> Result<Tensor> {
    match input.data() {
        TensorData::F32(x) => Tensor::from_f32(input.shape(), x.iter().map(|&v| relu_f32(v)).collect()),
        TensorData::I8(x) => {
            let qp = input
                .qparams()
                .ok_or_else(|| Error::MissingQParams("relu input".into()))?;
            let zp = qp.zero_point() as i8;
            Tensor::from_i8(input.shape(), x.iter().map(|&q| q.max(zp)).collect(), qp)
        }
        TensorData::I32(_) => Err(Error::DType("relu on i32 tensor".into())),
    }
}

/// Input channel feeding output channel `j`: the reshape `(g, C/g)`,
/// transpose, flatten permutation.
pub fn shuffle_source_channel(j: usize, channels: usize, groups: usize) -> usize {
    (j % groups) * (channels / groups) + j / groups
}

pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::InvalidAttr(format!(
            "channel shuffle: {} channels not divisible by {groups} groups",
            s.c
        )));
    }
    let perm: Vec<usize> = (0..s.c).map(|j| shuffle_source_channel(j, s.c, groups)).collect();
    fn permute<T: Copy>(x: &[T], perm: &[usize]) -> Vec<T> {
        let c = perm.len();
        let mut out = Vec::with_capacity(x.len());
        for px in x.chunks_exact(c) {
            out.extend(perm.iter().map(|&src| px[src]));
        }
        out
    }
    let data = match input.data() {
        TensorData::F32(x) => TensorData::F32(permute(x, &perm)),
        TensorData::I8(x) => TensorData::I8(permute(x, &perm)),
        TensorData::I32(x) => TensorData::I32(permute(x, &perm)),
    };
    Tensor::new(s, data, input.qparams())
}

/// Row-wise softmax over the channel axis. INT8 logits are dequantized
/// first; the arithmetic runs in f64 with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    let x = logits.to_f32_vec()?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(s.c.max(1)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    Tensor::from_f32(s, out)
}

/// Folds inference-mode batch normalisation into the preceding layer's
/// weights and bias (per output channel, the last weight axis).
pub fn fold_batchnorm(weights: &Tensor, bias: Option<&Tensor>, bn: &BatchNormParams) -> Result<(Tensor, Tensor)> {
    let ws = weights.shape();
    let cout = ws.c;
    let c = bn.channels();
    if bn.beta.len() != c || bn.moving_mean.len() != c || bn.moving_var.len() != c {
        return Err(Error::Shape("batch-norm vectors differ in length".into()));
    }
    if c != cout {
        return Err(Error::Shape(format!(
            "batch-norm has {c} channels, layer has {cout} outputs"
        )));
    }
    let w = weights.as_f32()?;
    let b = match bias {
        Some(b) if b.len() == cout => b.as_f32()?.to_vec(),
        Some(b) => {
            return Err(Error::Shape(format!(
                "bias has {} elements, expected {cout}",
                b.len()
            )))
        }
        None => vec![0.0; cout],
    };
    let mut factor = Vec::with_capacity(cout);
    for ch in 0..cout {
        let denom = bn.moving_var[ch] as f64 + bn.epsilon as f64;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::InvalidAttr(format!(
                "batch-norm channel {ch}: var + epsilon = {denom} is not positive"
            )));
        }
        factor.push(bn.gamma[ch] as f64 / denom.sqrt());
    }
    let folded_w: Vec<f32> = w
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * factor[i % cout]) as f32)
        .collect();
    let folded_b: Vec<f32> = (0..cout)
        .map(|ch| ((b[ch] as f64 - bn.moving_mean[ch] as f64) * factor[ch] + bn.beta[ch] as f64) as f32)
        .collect();
    Ok((
        Tensor::from_f32(ws, folded_w)?,
        Tensor::from_f32(crate::tensor::Shape::vector(cout), folded_b)?,
    ))
}
