//! Generator data selection, base/SFT training, the OFT ablation grid and the λ sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OrchestratorError, RunConfig};
use crate::flow::{train_flow, FlowExample, VelocityModel, VelocityModelConfig};
use crate::oft::{eval_mean_reward, oft_train, EvalPoint, OftError, SubjectLocator};
use crate::reward::{evaluate_accuracy, train_sciscore, DualEncoderConfig, RewardModel};
use crate::rng::mix;
use crate::synthworld::{standard_world, Complexity, SciTuple, Split};

fn generator_tuples(tuples: &[SciTuple]) -> impl Iterator<Item = &SciTuple> {
    tuples
        .iter()
        .filter(|t| t.split == Split::Train && t.complexity == Complexity::Simple)
}

/// Base-model data: explicit and superficial prompts with their own images, and
/// implicit prompts paired with the superficial image (the literal reading a
/// generic generator produces).
pub fn pretrain_examples(tuples: &[SciTuple]) -> Vec<FlowExample> {
    let mut out = Vec::new();
    for t in generator_tuples(tuples) {
        out.push(FlowExample {
            prompt: t.explicit_prompt.clone(),
            image: t.explicit_image.clone(),
        });
        out.push(FlowExample {
            prompt: t.superficial_prompt.clone(),
            image: t.superficial_image.clone(),
        });
        out.push(FlowExample {
            prompt: t.implicit_prompt.clone(),
            image: t.superficial_image.clone(),
        });
    }
    out
}

/// Supervised fine-tuning data: implicit prompt → explicit image.
pub fn sft_examples(tuples: &[SciTuple]) -> Vec<FlowExample> {
    generator_tuples(tuples)
        .map(|t| FlowExample {
            prompt: t.implicit_prompt.clone(),
            image: t.explicit_image.clone(),
        })
        .collect()
}

/// Distinct implicit prompts of the generator's training tuples, sorted.
pub fn oft_prompt_pool(tuples: &[SciTuple]) -> Vec<String> {
    let mut pool: Vec<String> = generator_tuples(tuples).map(|t| t.implicit_prompt.clone()).collect();
    pool.sort();
    pool.dedup();
    pool
}

/// Every third pool prompt: the fixed set behind eval-vs-step curves.
pub fn eval_prompts(tuples: &[SciTuple]) -> Vec<String> {
    oft_prompt_pool(tuples).into_iter().step_by(3).collect()
}

pub fn train_base(cfg: &RunConfig, tuples: &[SciTuple], metrics: Option<&Path>) -> Result<VelocityModel, OrchestratorError> {
    let examples = pretrain_examples(tuples);
    let mut mc = VelocityModelConfig::new(standard_world().vocabulary(), cfg.stage_seed("generator"));
    mc.hidden = cfg.generator.hidden;
    mc.cond_dim = cfg.generator.cond_dim;
    mc.time_dim = cfg.generator.time_dim;
    let hyper = RunConfig::flow_hyper(&cfg.pretrain, cfg.stage_seed("pretrain"));
    Ok(train_flow(VelocityModel::new(mc), &examples, &hyper, metrics)?.0)
}

pub fn train_sft(
    cfg: &RunConfig,
    base: &VelocityModel,
    tuples: &[SciTuple],
    seed: u64,
    metrics: Option<&Path>,
) -> Result<VelocityModel, OrchestratorError> {
    let hyper = RunConfig::flow_hyper(&cfg.sft, seed);
    Ok(train_flow(base.clone(), &sft_examples(tuples), &hyper, metrics)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Masked OFT from the SFT model.
    SftOft,
    /// Masked OFT straight from the base model.
    OftOnly,
    /// Unmasked OFT from the SFT model at the configured lr.
    NoMask,
    /// Unmasked OFT from the SFT model at half the lr.
    NoMaskHalfLr,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::SftOft, Self::OftOnly, Self::NoMask, Self::NoMaskHalfLr];

    pub fn label(self) -> &'static str {
        match self {
            Self::SftOft => "sft+oft",
            Self::OftOnly => "oft-only",
            Self::NoMask => "no-mask",
            Self::NoMaskHalfLr => "no-mask (lr/2)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: AblationVariant,
    pub curve: Vec<EvalPoint>,
    /// Eval reward at step 0 (the initial model).
    pub start: f64,
    /// Eval reward after the last step; `None` when training diverged.
    pub end: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Eval reward of the shared base model under each seed's eval noise.
    pub base: Vec<f64>,
    /// Eval reward of each seed's SFT model.
    pub sft: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationReport {
    pub fn rows_of(&self, variant: AblationVariant) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    /// Median final reward; a diverged run counts as −∞.
    pub fn median_end(&self, variant: AblationVariant) -> f64 {
        let v: Vec<f64> = self.rows_of(variant).map(|r| r.end.unwrap_or(f64::NEG_INFINITY)).collect();
        median(&v)
    }

    pub fn median_gain(&self, variant: AblationVariant) -> f64 {
        let v: Vec<f64> = self
            .rows_of(variant)
            .map(|r| r.end.map_or(f64::NEG_INFINITY, |e| e - r.start))
            .collect();
        median(&v)
    }
}

/// The ordering checks over one ablation report. The noise band is the spread
/// (max − min) of OFT-only step-0 rewards across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub base: f64,
    pub sft: f64,
    pub sft_oft: f64,
    pub oft_only_gain: f64,
    pub noise_band: f64,
    pub no_mask_end: f64,
    pub no_mask_diverged: usize,
    pub sft_oft_beats_sft: bool,
    pub sft_beats_base: bool,
    pub oft_only_flat: bool,
    pub no_mask_worse: bool,
}

impl OrderingVerdict {
    pub fn holds(&self) -> bool {
        self.sft_oft_beats_sft && self.sft_beats_base && self.oft_only_flat && self.no_mask_worse
    }
}

impl AblationReport {
    pub fn verdict(&self) -> OrderingVerdict {
        let starts: Vec<f64> = self.rows_of(AblationVariant::OftOnly).map(|r| r.start).collect();
        let band = starts.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - starts.iter().copied().fold(f64::INFINITY, f64::min);
        let (base, sft) = (median(&self.base), median(&self.sft));
        let sft_oft = self.median_end(AblationVariant::SftOft);
        let oft_only_gain = self.median_gain(AblationVariant::OftOnly);
        let no_mask_end = self.median_end(AblationVariant::NoMask);
        let no_mask_diverged = self.rows_of(AblationVariant::NoMask).filter(|r| r.diverged).count();
        let n_no_mask = self.rows_of(AblationVariant::NoMask).count();
        OrderingVerdict {
            base,
            sft,
            sft_oft,
            oft_only_gain,
            noise_band: band,
            no_mask_end,
            no_mask_diverged,
            sft_oft_beats_sft: sft_oft > sft,
            sft_beats_base: sft > base,
            oft_only_flat: oft_only_gain <= band,
            no_mask_worse: 2 * no_mask_diverged > n_no_mask || no_mask_end < sft_oft,
        }
    }
}

/// Runs each variant for every seed. One base model is shared; each seed trains
/// its own SFT model and OFT runs.
pub fn run_ablation(
    cfg: &RunConfig,
    tuples: &[SciTuple],
    reward: &dyn RewardModel,
    base: &VelocityModel,
    locator: &dyn SubjectLocator,
    variants: &[AblationVariant],
) -> Result<AblationReport, OrchestratorError> {
    let pool = oft_prompt_pool(tuples);
    let evals = eval_prompts(tuples);
    let mut report = AblationReport {
        seeds: Vec::new(),
        base: Vec::new(),
        sft: Vec::new(),
        rows: Vec::new(),
    };
    for s in 0..cfg.ablation.seeds as u64 {
        let seed = mix(&[cfg.seed, 0xAB1A, s]);
        let sft = train_sft(cfg, base, tuples, seed, None)?;
        let oft_cfg = cfg.oft_config(seed);
        let eval = |m: &VelocityModel| {
            eval_mean_reward(m, reward, &evals, oft_cfg.eval_images_per_prompt, oft_cfg.n_steps, seed)
        };
        report.seeds.push(seed);
        report.base.push(eval(base)?);
        report.sft.push(eval(&sft)?);
        log::info!("ablation seed {s}: base {:.4} sft {:.4}", report.base[s as usize], report.sft[s as usize]);
        for &variant in variants {
            let mut c = oft_cfg.clone();
            let init = match variant {
                AblationVariant::OftOnly => base,
                _ => &sft,
            };
            if matches!(variant, AblationVariant::NoMask | AblationVariant::NoMaskHalfLr) {
                c.use_mask = false;
            }
            if variant == AblationVariant::NoMaskHalfLr {
                c.lr *= 0.5;
            }
            let row = match oft_train(init.clone(), init, reward, &pool, &evals, locator, &c, None) {
                Ok(out) => AblationRow {
                    seed,
                    variant,
                    start: out.eval_curve[0].mean_reward,
                    end: out.eval_curve.last().map(|p| p.mean_reward),
                    curve: out.eval_curve,
                    diverged: false,
                },
                Err(OftError::NonFinite(step)) => {
                    log::warn!("{} diverged at step {step}", variant.label());
                    AblationRow {
                        seed,
                        variant,
                        start: eval(init)?,
                        end: None,
                        curve: Vec::new(),
                        diverged: true,
                    }
                }
                Err(e) => return Err(e.into()),
            };
            log::info!("ablation seed {s} {}: {:.4} -> {:?}", variant.label(), row.start, row.end);
            report.rows.push(row);
        }
    }
    Ok(report)
}

pub fn render_ablation_table(r: &AblationReport) -> String {
    let mut out = String::from("| model | median start | median final | median gain | diverged |\n|---|---|---|---|---|\n");
    out += &format!("| base | {:.4} | {:.4} | | |\n", median(&r.base), median(&r.base));
    out += &format!("| sft | {:.4} | {:.4} | | |\n", median(&r.sft), median(&r.sft));
    for v in AblationVariant::ALL {
        let rows: Vec<&AblationRow> = r.rows_of(v).collect();
        if rows.is_empty() {
            continue;
        }
        let starts: Vec<f64> = rows.iter().map(|x| x.start).collect();
        out += &format!(
            "| {} | {:.4} | {:.4} | {:+.4} | {}/{} |\n",
            v.label(),
            median(&starts),
            r.median_end(v),
            r.median_gain(v),
            rows.iter().filter(|x| x.diverged).count(),
            rows.len()
        );
    }
    let v = r.verdict();
    let yn = |b: bool| if b { "yes" } else { "no" };
    out += &format!(
        "\nsft+oft > sft: {}\nsft > base: {}\noft-only gain {:+.4} within noise band {:.4}: {}\nno-mask diverges or ends below sft+oft: {}\n",
        yn(v.sft_oft_beats_sft),
        yn(v.sft_beats_base),
        v.oft_only_gain,
        v.noise_band,
        yn(v.oft_only_flat),
        yn(v.no_mask_worse)
    );
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub train: f64,
    pub test_simple: f64,
    pub test_complex: f64,
    pub final_loss: f64,
}

/// Trains one reward model per λ and reports two-choice accuracy per split.
pub fn lambda_sweep(cfg: &RunConfig, tuples: &[SciTuple]) -> Result<Vec<SweepRow>, OrchestratorError> {
    let split = |s: Split| tuples.iter().filter(|t| t.split == s).cloned().collect::<Vec<_>>();
    let (train, simple, complex) = (split(Split::Train), split(Split::TestSimple), split(Split::TestComplex));
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let mut hyper = cfg.reward_hyper(cfg.stage_seed("reward"));
        hyper.lambda = lambda;
        let enc = DualEncoderConfig::new(standard_world().vocabulary(), cfg.stage_seed("reward-init"));
        let out = train_sciscore(&train, enc, &hyper, None)?;
        let acc = |ts: &[SciTuple], name: &str| -> Result<f64, OrchestratorError> {
            Ok(if ts.is_empty() { f64::NAN } else { evaluate_accuracy(&out.model, ts, name)?.overall })
        };
        let row = SweepRow {
            lambda,
            train: acc(&train, "train")?,
            test_simple: acc(&simple, "test_simple")?,
            test_complex: acc(&complex, "test_complex")?,
            final_loss: out.history.last().map_or(f64::NAN, |h| h.loss),
        };
        log::info!("lambda {lambda}: {row:?}");
        rows.push(row);
    }
    Ok(rows)
}

pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("| λ | train acc | test-simple acc | test-complex acc | final loss |\n|---|---|---|---|---|\n");
    for r in rows {
        out += &format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.4} |\n",
            r.lambda, r.train, r.test_simple, r.test_complex, r.final_loss
        );
    }
    out
}
