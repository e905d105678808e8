//! Variance-preserving noise schedules and the forward, ancestral, guided and
//! DDIM processes built on them.

pub mod process;
pub mod schedule;

pub use process::{
    chain_timesteps, check_compatible, classifier_score, ddim_chain_on, ddim_from_eps, ddim_step,
    ddim_step_on, forward_sample, forward_sample_on, posterior_mu, posterior_mu_from_eps,
    reverse_step, reverse_step_with_noise, sample_chain, Guidance, NoisePredictor, Sampler,
    TimeClassifier, DEFAULT_GUIDANCE_SCALE,
};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec, DEFAULT_STEPS};
