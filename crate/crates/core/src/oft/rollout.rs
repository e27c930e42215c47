use rand::seq::index::sample;
use rand::Rng;

use super::OftError;
use crate::flow::{decode_latent, initial_noise, VelocityModel};
use crate::reward::RewardModel;
use crate::sde::{sde_rollout_from, ChurnParams, PolicyStep};
use crate::synthworld::RasterImage;

use super::dpo::is_trainable_step;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub prompt: String,
    pub cond: Vec<u32>,
    pub seed: u64,
    pub steps: Vec<PolicyStep>,
    pub image: RasterImage,
    pub reward: f64,
}

impl FlowTrajectory {
    /// Keeps `k` trainable steps chosen uniformly without replacement (all if fewer).
    pub fn subsample(&self, k: usize, rng: &mut impl Rng) -> FlowTrajectory {
        let eligible: Vec<usize> = (0..self.steps.len()).filter(|&i| is_trainable_step(&self.steps[i])).collect();
        if k == 0 || k >= eligible.len() {
            return self.clone();
        }
        let mut pick: Vec<usize> = sample(rng, eligible.len(), k).into_iter().map(|j| eligible[j]).collect();
        pick.sort_unstable();
        FlowTrajectory {
            steps: pick.into_iter().map(|i| self.steps[i].clone()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub winner: FlowTrajectory,
    pub loser: FlowTrajectory,
    /// Equal rewards; `winner` is then simply the first rollout.
    pub tie: bool,
}

/// Orders two scored rollouts; the first wins ties.
pub fn order_pair(a: FlowTrajectory, b: FlowTrajectory) -> TrajectoryPair {
    let tie = a.reward == b.reward;
    if b.reward > a.reward {
        TrajectoryPair { winner: b, loser: a, tie }
    } else {
        TrajectoryPair { winner: a, loser: b, tie }
    }
}

/// Unscored stochastic rollout; `reward` is left at 0. The initial noise is
/// drawn from `init_seed`, the step noise from `seed`.
pub fn rollout_trajectory(
    model: &VelocityModel,
    prompt: &str,
    n_steps: usize,
    params: &ChurnParams,
    init_seed: u64,
    seed: u64,
) -> Result<FlowTrajectory, OftError> {
    let steps = sde_rollout_from(model, prompt, initial_noise(model, init_seed), n_steps, params, seed)?;
    let image = decode_latent(&steps.last().expect("n_steps ≥ 1").action)?;
    Ok(FlowTrajectory {
        prompt: prompt.to_string(),
        cond: model.tokenize(prompt)?,
        seed,
        steps,
        image,
        reward: 0.0,
    })
}

/// Two rollouts for one prompt, scored against that prompt and ordered. With
/// `shared_init` both start from the initial noise of `seeds.0` and differ only
/// in their step noise.
pub fn rollout_pair(
    model: &VelocityModel,
    reward: &dyn RewardModel,
    prompt: &str,
    n_steps: usize,
    params: &ChurnParams,
    seeds: (u64, u64),
    shared_init: bool,
) -> Result<TrajectoryPair, OftError> {
    let init_b = if shared_init { seeds.0 } else { seeds.1 };
    let mut a = rollout_trajectory(model, prompt, n_steps, params, seeds.0, seeds.0)?;
    let mut b = rollout_trajectory(model, prompt, n_steps, params, init_b, seeds.1)?;
    let scores = reward.score_batch(prompt, &[&a.image, &b.image])?;
    a.reward = scores[0];
    b.reward = scores[1];
    Ok(order_pair(a, b))
}
