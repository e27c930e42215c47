//! Online preference fine-tuning.
//!
//! Each step rolls out two stochastic trajectories per prompt, ranks them by
//! reward, masks the per-coordinate log-density terms to latent cells around
//! the detected subject, and minimises the trajectory-level DPO loss against a
//! frozen reference model.

mod adapters;
mod dpo;
mod mask;
mod rollout;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapters::{HttpDetector, HttpSubjectExtractor, SaturationLocator, SubjectLocator};
pub use dpo::{
    dpo_loss, dpo_loss_and_grads, is_trainable_step, masked_step_logratio, trajectory_logratio, DpoTerms,
};
pub use mask::{box_to_latent, pad_box, LatentMask, LatentRect, SubjectBox};
pub use rollout::{order_pair, rollout_pair, rollout_trajectory, FlowTrajectory, TrajectoryPair};
pub use train::{eval_mean_reward, oft_train, EvalPoint, OftOutcome, OftStepMetrics};

use crate::flow::FlowError;
use crate::reward::RewardError;
use crate::sde::{ChurnParams, SdeError};

#[derive(Debug, Error)]
pub enum OftError {
    #[error("mask: {0}")]
    Mask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("adapter: {0}")]
    Adapter(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OftConfig {
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_accum: usize,
    pub prompts_per_epoch: usize,
    pub prompt_pool: usize,
    pub images_per_prompt: usize,
    pub weight_decay: f64,
    /// Sampler steps per rollout.
    pub n_steps: usize,
    pub churn: ChurnParams,
    /// Both rollouts of a pair start from the same initial noise.
    pub shared_init: bool,
    pub use_mask: bool,
    pub mask_padding: f64,
    /// Trainable steps kept per trajectory; 0 keeps all of them.
    pub step_subsample: usize,
    pub eval_every: usize,
    pub eval_images_per_prompt: usize,
    pub seed: u64,
}

impl Default for OftConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            batch_size: 8,
            lr: 3e-4,
            steps: 140,
            grad_accum: 2,
            prompts_per_epoch: 32,
            prompt_pool: 300,
            images_per_prompt: 2,
            weight_decay: 0.0,
            n_steps: 8,
            churn: ChurnParams::default(),
            shared_init: true,
            use_mask: true,
            mask_padding: 0.1,
            step_subsample: 0,
            eval_every: 20,
            eval_images_per_prompt: 2,
            seed: 0,
        }
    }
}

impl OftConfig {
    /// Toy-world recipe.
    pub fn desk() -> Self {
        Self {
            steps: 40,
            eval_every: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OftError> {
        let bad = |m: &str| Err(OftError::Config(m.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.prompts_per_epoch == 0 {
            return bad("batch_size, grad_accum and prompts_per_epoch must be positive");
        }
        if self.images_per_prompt != 2 {
            return bad("pairwise preference needs exactly 2 images per prompt");
        }
        if self.n_steps < 2 {
            return bad("n_steps must be at least 2");
        }
        if self.eval_images_per_prompt == 0 {
            return bad("eval_images_per_prompt must be positive");
        }
        self.churn.validate()?;
        Ok(())
    }
}
