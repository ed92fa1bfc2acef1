//! INT8 inference engine and deployment profiler for five-class diabetic
//! retinopathy fundus-image classifiers.
//!
//! The crate covers the whole pipeline: NHWC tensors and affine INT8
//! quantization ([`tensor`]), f32/INT8 layer kernels ([`ops`]), a model IR
//! with four architecture builders, a binary model format and an executor
//! ([`graph`]), post-training quantization ([`quantizer`]), MAC counting,
//! arena planning and device latency estimation ([`profiler`]), and dataset
//! handling plus classification metrics ([`evalbench`]).
//!
//! Inner loops run on rayon when the default `parallel` feature is on;
//! results are bit-identical to the sequential build.

pub mod error;
pub mod evalbench;
pub mod graph;
pub mod ops;
pub mod par;
pub mod profiler;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, ErrorFamily, Result};
pub use graph::{DrLabel, ModelGraph, Precision};
pub use tensor::{QuantParams, Shape, Tensor};
