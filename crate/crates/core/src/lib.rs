//! Two-stage spatio-temporal video denoiser with channel-wise attention.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training and
//! the file formats use `f32`, and the aliases below name those instances.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
mod linalg;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod stn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{apply_attention, attention_forward, AttentionParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{add_gaussian_noise, make_window, Clip, Crop, Dataset, FrameWindow};
pub use error::{Error, Result};
pub use kernels::{ChannelStats, ConvGeometry};
pub use layers::{Forward, Mode};
pub use metrics::{psnr, ssim, MetricsReport};
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use pipeline::{pipeline_forward, Denoiser, PipelineParams};
pub use scalar::Scalar;
pub use stn::{stn_forward, stn_init, StnParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{train, train_on, LrSchedule, TrainConfig, TrainSummary};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore32 = ParamStore<f32>;
pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type AdamState32 = AdamState<f32>;
