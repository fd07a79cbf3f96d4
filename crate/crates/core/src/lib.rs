//! Crowd-scene analysis toolkit.
//!
//! Two pipelines share the tensor, autodiff and I/O layers here:
//!
//! * crowd counting: a five-column feature extractor is pre-trained on a
//!   self-supervised rotation task ([`ssl_stage1`]), then a density head is
//!   trained by Sinkhorn-matching per-crop counts to a crowd prior
//!   ([`ot_stage2`]);
//! * violence detection: a two-stream VGG-19 backbone with a wide dense
//!   residual block feeds an LSTM over consecutive frame pairs
//!   ([`anomaly_net`]), fed by the clip pipeline in [`video_frames`].
//!
//! All numeric code is generic over [`Scalar`]; the `*32` aliases are the
//! training types and the `*64` aliases are used for gradient checks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod anomaly_net;
pub mod augment;
pub mod dataset_io;
pub mod density;
pub mod error;
pub mod graph;
pub mod mcnn_fen;
pub mod metrics;
pub mod optim;
pub mod ot_stage2;
pub mod params;
pub mod scalar;
pub mod ssl_stage1;
pub mod tensor;
pub mod video_frames;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type DensityMap32 = density::DensityMap<f32>;
pub type DensityMap64 = density::DensityMap<f64>;
pub type AnomalyModel32 = anomaly_net::AnomalyModel<f32>;
pub type FrameSequence32 = video_frames::FrameSequence<f32>;
pub type ClipDataset32 = video_frames::ClipDatasetArrays<f32>;
