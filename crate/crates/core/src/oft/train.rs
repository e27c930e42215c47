use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{
    dpo_loss_and_grads, rollout_pair, LatentMask, OftConfig, OftError, SubjectLocator, TrajectoryPair,
};
use crate::autograd::Grads;
use crate::flow::{ode_sample_batch, VelocityModel};
use crate::metrics::MetricsWriter;
use crate::optim::{AdamW, AdamWConfig};
use crate::reward::RewardModel;
use crate::rng::{mix, stream_rng};
use crate::synthworld::RasterImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OftStepMetrics {
    pub step: usize,
    /// Mean DPO loss over untied pairs; absent when every pair tied.
    pub loss: Option<f64>,
    pub pairs: usize,
    pub ties: usize,
    pub skipped: bool,
    pub rollout_reward: f64,
    pub mask_fraction: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_reward: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Optimizer steps taken before the evaluation.
    pub step: usize,
    pub mean_reward: f64,
}

#[derive(Clone, Debug)]
pub struct OftOutcome {
    pub model: VelocityModel,
    pub history: Vec<OftStepMetrics>,
    pub eval_curve: Vec<EvalPoint>,
}

/// Mean reward of deterministic samples, `images_per_prompt` seeds per prompt.
pub fn eval_mean_reward(
    model: &VelocityModel,
    reward: &dyn RewardModel,
    prompts: &[String],
    images_per_prompt: usize,
    n_steps: usize,
    seed: u64,
) -> Result<f64, OftError> {
    if prompts.is_empty() {
        return Err(OftError::Empty("evaluation prompts"));
    }
    let mut jobs = Vec::with_capacity(prompts.len() * images_per_prompt);
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..images_per_prompt {
            jobs.push((p.as_str(), mix(&[seed, 0xE7A1, i as u64, j as u64])));
        }
    }
    let images = ode_sample_batch(model, &jobs, n_steps)?;
    let mut total = 0.0;
    for ((p, _), img) in jobs.iter().zip(&images) {
        total += reward.score(p, img)?;
    }
    Ok(total / jobs.len() as f64)
}

fn mask_for(
    locator: &dyn SubjectLocator,
    image: &RasterImage,
    prompt: &str,
    cfg: &OftConfig,
    latent_hw: (usize, usize),
) -> Result<LatentMask, OftError> {
    match locator.locate(image, prompt)? {
        Some(b) => LatentMask::from_box(b, cfg.mask_padding, (image.height, image.width), latent_hw),
        // Nothing detected: fall back to the unrestricted objective.
        None => Ok(LatentMask::all_ones(latent_hw.0, latent_hw.1)),
    }
}

/// Online DPO from `policy` against the frozen `reference`.
#[allow(clippy::too_many_arguments)]
pub fn oft_train(
    mut policy: VelocityModel,
    reference: &VelocityModel,
    reward: &dyn RewardModel,
    pool: &[String],
    eval_prompts: &[String],
    locator: &dyn SubjectLocator,
    cfg: &OftConfig,
    metrics_path: Option<&Path>,
) -> Result<OftOutcome, OftError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(OftError::Empty("prompt pool"));
    }
    let pool: Vec<&String> = if pool.len() > cfg.prompt_pool {
        let mut idx = sample(&mut stream_rng(cfg.seed, 10), pool.len(), cfg.prompt_pool).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &pool[i]).collect()
    } else {
        pool.iter().collect()
    };
    let latent_hw = (policy.config.latent_height, policy.config.latent_width);
    let mut opt = AdamW::new(
        &policy.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut metrics = MetricsWriter::optional(metrics_path)?;
    let eval = |m: &VelocityModel| {
        eval_mean_reward(m, reward, eval_prompts, cfg.eval_images_per_prompt, cfg.n_steps, cfg.seed)
    };
    let mut eval_curve = vec![EvalPoint {
        step: 0,
        mean_reward: eval(&policy)?,
    }];
    let mut history = Vec::with_capacity(cfg.steps);
    let (mut epoch_prompts, mut cursor, mut epoch) = (Vec::<usize>::new(), 0usize, 0u64);
    for step in 0..cfg.steps {
        let mut total = Grads::empty(policy.params.len());
        let (mut pairs, mut ties) = (0usize, 0usize);
        let (mut loss_sum, mut reward_sum, mut rollouts, mut mask_sum) = (0.0, 0.0, 0usize, 0.0);
        for micro in 0..cfg.grad_accum {
            for j in 0..cfg.batch_size {
                if cursor == epoch_prompts.len() {
                    let k = cfg.prompts_per_epoch.min(pool.len());
                    epoch_prompts = sample(&mut stream_rng(cfg.seed, mix(&[11, epoch])), pool.len(), k).into_vec();
                    epoch += 1;
                    cursor = 0;
                }
                let prompt = pool[epoch_prompts[cursor]].as_str();
                cursor += 1;
                let key = |w: u64| mix(&[cfg.seed, step as u64, micro as u64, j as u64, w]);
                let seeds = (key(0), key(1));
                let mut pair = rollout_pair(&policy, reward, prompt, cfg.n_steps, &cfg.churn, seeds, cfg.shared_init)?;
                reward_sum += pair.winner.reward + pair.loser.reward;
                rollouts += 2;
                if pair.tie {
                    ties += 1;
                    continue;
                }
                if cfg.step_subsample > 0 {
                    let mut rng = stream_rng(cfg.seed, mix(&[12, step as u64, micro as u64, j as u64]));
                    pair = TrajectoryPair {
                        winner: pair.winner.subsample(cfg.step_subsample, &mut rng),
                        loser: pair.loser.subsample(cfg.step_subsample, &mut rng),
                        tie: false,
                    };
                }
                let masks = if cfg.use_mask {
                    let mw = mask_for(locator, &pair.winner.image, prompt, cfg, latent_hw)?;
                    let ml = mask_for(locator, &pair.loser.image, prompt, cfg, latent_hw)?;
                    let cells = (latent_hw.0 * latent_hw.1) as f64;
                    mask_sum += (mw.active() + ml.active()) as f64 / (2.0 * cells);
                    Some((mw, ml))
                } else {
                    mask_sum += 1.0;
                    None
                };
                let (terms, g) =
                    dpo_loss_and_grads(&policy, reference, &pair, cfg.beta, masks.as_ref().map(|(a, b)| (a, b)))?;
                loss_sum += terms.loss;
                total.accumulate(&g);
                pairs += 1;
            }
        }
        let mut rec = OftStepMetrics {
            step,
            loss: (pairs > 0).then(|| loss_sum / pairs as f64),
            pairs,
            ties,
            skipped: pairs == 0,
            rollout_reward: reward_sum / rollouts.max(1) as f64,
            mask_fraction: if pairs > 0 { mask_sum / pairs as f64 } else { 0.0 },
            lr: cfg.lr,
            eval_reward: None,
        };
        if pairs == 0 {
            log::warn!("oft step {step}: every pair tied, skipping update");
        } else {
            total.scale(1.0 / pairs as f64);
            if !loss_sum.is_finite() || !total.is_finite() {
                return Err(OftError::NonFinite(step));
            }
            opt.step(&mut policy.params, &total, cfg.lr);
            policy.step += 1;
        }
        let done = step + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.steps {
            let r = eval(&policy)?;
            eval_curve.push(EvalPoint {
                step: done,
                mean_reward: r,
            });
            rec.eval_reward = Some(r);
        }
        metrics.write(&rec)?;
        history.push(rec);
    }
    metrics.flush()?;
    Ok(OftOutcome {
        model: policy,
        history,
        eval_curve,
    })
}
