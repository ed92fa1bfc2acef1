//! Layer kernels. Each kernel has an f32 path and an INT8 path selected by
//! the input dtype; INT8 paths accumulate in i32 and requantize with the
//! fixed-point [`Multiplier`](crate::tensor::Multiplier).
//!
//! Weight layout is `[kh, kw, in_channels / groups, out_channels]`, stored
//! in a rank-4 [`Tensor`] as `n=kh, h=kw, w=cin_g, c=cout`. Dense weights
//! are the 1×1 special case `[1, 1, K, M]`.

mod blocks;
mod conv;
mod elementwise;
mod pool;

pub use blocks::{
    concat_channels, depthwise_separable_block, dwsep_block, dwsep_block_traced, fire,
    fire_traced, DwSepParams, FireParams,
};
pub use conv::{conv2d, conv_output_shape, dense, output_dim};
pub use elementwise::{channel_shuffle, fold_batchnorm, relu, shuffle_source_channel, softmax};
pub use pool::{global_avg_pool, maxpool2d, maxpool_output_shape};

use crate::error::{Error, Result};
use crate::tensor::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Symmetric zero padding; an odd total puts the extra pixel on the
    /// bottom/right edge.
    Same,
}

impl Padding {
    pub(crate) fn code(self) -> u8 {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Padding::Valid),
            1 => Some(Padding::Same),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
    pub out_channels: usize,
}

impl ConvAttrs {
    pub fn new(kernel: usize, stride: usize, padding: Padding, out_channels: usize) -> Self {
        ConvAttrs {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            groups: 1,
            out_channels,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// 3×3-style depthwise convolution over `channels` (multiplier 1).
    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Self {
        ConvAttrs::new(kernel, stride, Padding::Same, channels).with_groups(channels)
    }

    pub(crate) fn check(&self, in_channels: usize) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidAttr(format!("kernel {kh}×{kw} is empty")));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidAttr(format!("stride {sh}×{sw} must be positive")));
        }
        if self.groups == 0 || self.out_channels == 0 {
            return Err(Error::InvalidAttr("groups and out_channels must be positive".into()));
        }
        if in_channels % self.groups != 0 {
            return Err(Error::InvalidAttr(format!(
                "in_channels {in_channels} not divisible by groups {}",
                self.groups
            )));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::InvalidAttr(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireAttrs {
    pub squeeze_channels: usize,
    pub expand1_channels: usize,
    pub expand3_channels: usize,
}

impl FireAttrs {
    pub const fn new(squeeze: usize, expand1: usize, expand3: usize) -> Self {
        FireAttrs {
            squeeze_channels: squeeze,
            expand1_channels: expand1,
            expand3_channels: expand3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1_channels + self.expand3_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub moving_mean: Vec<f32>,
    pub moving_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// Freshly initialised statistics: γ=1, β=0, mean=0, var=1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            moving_mean: vec![0.0; channels],
            moving_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What happens to an accumulator after the reduction: optional fused ReLU
/// and, on INT8 inputs, the output quantization. An INT8 kernel with no
/// output parameters emits dequantized f32 (used for logits).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Epilogue {
    pub relu: bool,
    pub output: Option<QuantParams>,
}

impl Epilogue {
    pub const NONE: Epilogue = Epilogue {
        relu: false,
        output: None,
    };
    pub const RELU: Epilogue = Epilogue {
        relu: true,
        output: None,
    };

    pub fn relu(relu: bool) -> Self {
        Epilogue { relu, output: None }
    }

    pub fn with_output(mut self, output: Option<QuantParams>) -> Self {
        self.output = output;
        self
    }
}
