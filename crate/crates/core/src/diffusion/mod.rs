//! Noise schedule and the forward/reverse transition kernels.
//!
//! Steps are indexed `1..=T` for noisy states; step 0 is clean data.

mod kernels;
mod schedule;

pub use kernels::{
    ddim_step, ddpm_step, forward_sample, masked_loss, masked_loss_with, score_from_x0, step_coefficients,
    x0_from_score, LossKind,
};
pub use schedule::{NoiseSchedule, ScheduleKind, COSINE_OFFSET, MAX_BETA};
