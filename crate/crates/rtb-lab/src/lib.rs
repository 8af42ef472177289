//! Diffusion-sampler laboratory: train small diffusion priors over
//! synthetic densities by trajectory balance (or denoising score matching),
//! fine-tune them into Bayesian posterior samplers with the relative
//! trajectory balance objective, and compare against training-free guidance
//! baselines under oracle-based evaluation.

pub mod error;
pub mod numerics;
pub mod reward;
pub mod util;

pub mod diffusion;
pub mod gmm;
pub mod harness;
pub mod buffer;
pub mod baselines;
pub mod config;
pub mod metrics;
pub mod posterior;
pub mod prior;
pub mod tasks;

pub use error::{Error, Result};
