//! Conditional diffusion super-resolution.

mod checkpoint;
mod deviation;
mod process;
mod schedule;
mod train;
mod unet;

pub use checkpoint::{CheckpointMeta, SrCheckpoint, METADATA_FILE, WEIGHTS_FILE};
pub use deviation::{correct_deviation, DomainStats, STD_FLOOR};
pub use process::{
    denoising_loss, draw_noised, estimate_y0, forward_noise, posterior_mean, posterior_mean_from_noise,
    refine_step, residual_target, standard_normal, super_resolve, super_resolve_observed, training_loss, training_step,
    Denoiser, NoisedBatch, NormExponent, TrainableDenoiser,
};
pub use schedule::{fnv1a64, linear_schedule, sample_gamma, NoiseSchedule, ScheduleParams};
pub use train::{train_denoiser, train_denoiser_observed, SrLogEntry, SrTrainOptions};
pub use unet::{noise_level_embedding, UNet, UNetConfig};
