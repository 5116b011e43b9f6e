//! Reinforcement learning from classifier feedback for a toy denoising
//! diffusion model.
//!
//! A small DDPM over d-dimensional points is pretrained on an imbalanced
//! two-mode mixture, then fine-tuned by treating its reverse chain as a
//! fixed-horizon policy whose only reward arrives at the final sample. The
//! reward comes from a Bayes classifier: either the probability of the
//! underrepresented class ([`feedback::reward_shift`]) or a batch-level
//! balance score ([`feedback::reward_balance`]).
//!
//! Module map:
//!
//! - [`diffusion`]: schedule, forward process, Gaussian reverse policy, trajectories, KL.
//! - [`denoiser`]: the MLP noise predictor, its gradients and checkpoint format.
//! - [`pretrain`]: mixture data and noise-prediction training of the base model.
//! - [`feedback`]: classifier and rewards.
//! - [`ddpo`]: advantages, clipped / KL-rollback surrogates, the fine-tuning loop.
//! - [`metrics`]: run-log CSV and SVG charts.
//! - [`config`], [`cli`]: the `debias` command.

pub mod cli;
pub mod config;
pub mod ddpo;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod feedback;
pub mod metrics;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
