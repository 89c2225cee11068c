//! Forward process, ε-prediction objective, denoiser and guided sampler.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use denoiser::{denoise, denoise_batch, DenoiserConfig, DenoiserParams, Model, DEFAULT_GUIDANCE_SCALE};
pub use sampler::{cfg_combine, cfg_predict, sample, sample_batch, InpaintRequest, SamplerConfig};
pub use schedule::{q_sample, q_sample_alpha_bar, DiffusionSchedule};
pub use train::{loss_and_grad, prepare_batch, training_loss, TrainExample};
