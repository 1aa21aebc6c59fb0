//! The toy conditional denoising diffusion model: schedules, the denoiser
//! with its h-space injection hook, guidance, sampling, pretraining, and
//! checkpoints.

pub mod checkpoint;
pub mod guidance;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use guidance::{cfg_two_term, guided_noise, GuidanceParams};
pub use model::{DenoiserHyper, DenoiserModel, HOffset, HTap};
pub use sampler::{ddpm_step, sample_batch_raw, sample_pair_averaged};
pub use schedule::NoiseSchedule;
pub use train::{pretrain, PretrainConfig, TrainReport};
