//! Score-guided adversarial attacks against plain and diffusion-purified
//! classifiers, built on a small self-contained tensor, autodiff and
//! diffusion stack.
//!
//! Module map:
//! - [`numeric`]: tensors, tape autodiff, RNG, tensor file format
//! - [`data`]: procedural shape dataset
//! - [`models`]: classifiers, time-conditioned classifier, denoiser, training
//! - [`diffusion`]: noise schedules, forward/reverse processes, DDIM, guidance
//! - [`purification`]: diffusion purification defense
//! - [`attacks`]: PGD, ScorePGD, U-ScorePGD, purifier-in-the-loop PGD
//! - [`evaluation`]: ASR, PSNR, SSIM, feature distance, runtime, suite runner

pub mod attacks;
pub mod error;
pub mod evaluation;
pub mod data;
pub mod diffusion;
pub mod models;
pub mod numeric;
pub mod par;
pub mod purification;

pub use error::{Error, Result};
