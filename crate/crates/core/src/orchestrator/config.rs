//! Run configuration: typed sections addressed by dotted keys.
//!
//! Text format, one `key = value` per line, `#` starts a comment. Values are
//! JSON when they parse as JSON and bare strings otherwise, so `lr = 1e-3`,
//! `use_mask = false`, `tasks = ["phase"]` and `judge = oracle` all work.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::flow::FlowHyper;
use crate::oft::OftConfig;
use crate::optim::ScheduleKind;
use crate::reward::RewardHyper;
use crate::rng::mix;
use crate::sde::ChurnParams;
use crate::synthworld::{DatasetConfig, SplitFractions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    PaperFaithful,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    /// Task ids; empty selects every task.
    pub tasks: Vec<String>,
    pub variants_per_combo: u32,
    pub train_fraction: f64,
    pub test_simple_fraction: f64,
    pub test_complex_fraction: f64,
    pub train_complex_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Sampler steps for rollouts, evaluation and benchmarking.
    pub sample_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub schedule: ScheduleKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OftSection {
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_accum: usize,
    pub prompts_per_epoch: usize,
    pub prompt_pool: usize,
    pub images_per_prompt: usize,
    pub weight_decay: f64,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: String,
    pub s_noise: f64,
    pub shared_init: bool,
    pub use_mask: bool,
    pub mask_padding: f64,
    pub step_subsample: usize,
    pub eval_every: usize,
    pub eval_images_per_prompt: usize,
    /// `saturation` (built-in detector) or `http` (detector service).
    pub locator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub images_per_prompt: usize,
    /// `oracle` or `http`.
    pub judge: String,
    /// `test_simple`, `test_complex` or `train`.
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: String,
    pub world: WorldSection,
    pub reward: RewardSection,
    pub generator: GeneratorSection,
    pub pretrain: FlowSection,
    pub sft: FlowSection,
    pub oft: OftSection,
    pub bench: BenchSection,
    pub ablation: AblationSection,
    pub sweep: SweepSection,
}

fn flow_section(h: &FlowHyper) -> FlowSection {
    FlowSection {
        batch_size: h.batch_size,
        lr: h.lr,
        steps: h.steps,
        grad_accum: h.grad_accum,
        weight_decay: h.weight_decay,
        warmup_steps: h.warmup_steps,
        schedule: h.schedule,
    }
}

fn reward_section(h: &RewardHyper) -> RewardSection {
    RewardSection {
        batch_size: h.batch_size,
        lr: h.lr,
        schedule: h.schedule,
        warmup_steps: h.warmup_steps,
        steps: h.steps,
        weight_decay: h.weight_decay,
        lambda: h.lambda,
        adam_beta1: h.adam_beta1,
        adam_beta2: h.adam_beta2,
        adam_eps: h.adam_eps,
    }
}

fn oft_section(c: &OftConfig) -> OftSection {
    OftSection {
        beta: c.beta,
        batch_size: c.batch_size,
        lr: c.lr,
        steps: c.steps,
        grad_accum: c.grad_accum,
        prompts_per_epoch: c.prompts_per_epoch,
        prompt_pool: c.prompt_pool,
        images_per_prompt: c.images_per_prompt,
        weight_decay: c.weight_decay,
        s_churn: c.churn.s_churn,
        s_min: c.churn.s_min,
        s_max: c.churn.s_max.to_string(),
        s_noise: c.churn.s_noise,
        shared_init: c.shared_init,
        use_mask: c.use_mask,
        mask_padding: c.mask_padding,
        step_subsample: c.step_subsample,
        eval_every: c.eval_every,
        eval_images_per_prompt: c.eval_images_per_prompt,
        locator: "saturation".into(),
    }
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let d = DatasetConfig::default();
        let mut cfg = Self {
            profile,
            seed: 0,
            out_dir: "runs/default".into(),
            world: WorldSection {
                tasks: d.tasks,
                variants_per_combo: d.variants_per_combo,
                train_fraction: d.split.train,
                test_simple_fraction: d.split.test_simple,
                test_complex_fraction: d.split.test_complex,
                train_complex_fraction: d.train_complex_fraction,
            },
            reward: reward_section(&RewardHyper::desk()),
            generator: GeneratorSection {
                hidden: 64,
                cond_dim: 32,
                time_dim: 16,
                sample_steps: 8,
            },
            pretrain: FlowSection {
                batch_size: 16,
                lr: 2e-3,
                steps: 6000,
                grad_accum: 1,
                weight_decay: 0.0,
                warmup_steps: 100,
                schedule: ScheduleKind::Cosine,
            },
            sft: flow_section(&FlowHyper::desk()),
            oft: oft_section(&OftConfig::desk()),
            bench: BenchSection {
                images_per_prompt: 2,
                judge: "oracle".into(),
                split: "test_simple".into(),
            },
            ablation: AblationSection { seeds: 3 },
            sweep: SweepSection {
                lambdas: vec![0.0, 0.1, 0.25, 0.5, 0.75],
            },
        };
        if profile == Profile::PaperFaithful {
            cfg.reward = reward_section(&RewardHyper::paper_faithful());
            cfg.sft = flow_section(&FlowHyper::paper_faithful());
            cfg.oft = oft_section(&OftConfig::default());
            cfg.oft.shared_init = false;
        }
        cfg
    }

    /// Resolves defaults < file < overrides. The profile is read first (overrides
    /// win) because it selects the defaults every other key lands on.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, OrchestratorError> {
        let file_entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| OrchestratorError::Config(format!("reading {}: {e}", p.display())))?;
                parse_entries(&text)?
            }
            None => Vec::new(),
        };
        let mut cli = BTreeMap::new();
        for (k, v) in overrides {
            if cli.insert(k.clone(), v.clone()).is_some() {
                return Err(OrchestratorError::Config(format!("override {k} given twice")));
            }
        }
        let profile_text = cli
            .get("profile")
            .cloned()
            .or_else(|| file_entries.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.clone()));
        let profile = match profile_text {
            Some(p) => serde_json::from_value(parse_value(&p))
                .map_err(|_| OrchestratorError::Config(format!("unknown profile {p:?} (desk, paper_faithful)")))?,
            None => Profile::Desk,
        };
        let mut cfg = Self::defaults(profile);
        let cli: Vec<(String, String)> = cli.into_iter().collect();
        for (k, v) in file_entries.iter().chain(&cli) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, text: &str) -> Result<(), OrchestratorError> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut root, |node, part| node.as_object_mut().and_then(|m| m.get_mut(part)))
            .filter(|v| !v.is_object())
            .ok_or_else(|| OrchestratorError::UnknownKey(key.to_string()))?;
        let mut value = parse_value(text);
        // Keep strings strings even when they look like JSON (`s_max = 1`).
        if slot.is_string() && !value.is_string() {
            value = Value::String(text.trim().trim_matches('"').to_string());
        }
        *slot = value;
        *self = serde_json::from_value(root).map_err(|e| OrchestratorError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        self.dataset_config().validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.churn()?;
        self.oft_config(0)
            .validate()
            .map_err(|e| OrchestratorError::Config(format!("oft: {e}")))?;
        if !matches!(self.bench.judge.as_str(), "oracle" | "http") {
            return bad(format!("bench.judge must be oracle or http, got {:?}", self.bench.judge));
        }
        if !matches!(self.oft.locator.as_str(), "saturation" | "http") {
            return bad(format!("oft.locator must be saturation or http, got {:?}", self.oft.locator));
        }
        if self.bench.images_per_prompt == 0 || self.ablation.seeds == 0 || self.generator.sample_steps < 2 {
            return bad("bench.images_per_prompt, ablation.seeds must be positive and generator.sample_steps ≥ 2".into());
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("sweep.lambdas must be non-negative".into());
        }
        Ok(())
    }

    /// Every key in `key = json` form, sorted; this is the persisted snapshot.
    pub fn snapshot(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the snapshot, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }

    /// Seed for one named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        mix(&[self.seed, crate::rng::hash_str(stage)])
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            tasks: self.world.tasks.clone(),
            variants_per_combo: self.world.variants_per_combo,
            split: SplitFractions {
                train: self.world.train_fraction,
                test_simple: self.world.test_simple_fraction,
                test_complex: self.world.test_complex_fraction,
            },
            train_complex_fraction: self.world.train_complex_fraction,
            seed: self.stage_seed("world"),
        }
    }

    pub fn reward_hyper(&self, seed: u64) -> RewardHyper {
        let r = &self.reward;
        RewardHyper {
            batch_size: r.batch_size,
            lr: r.lr,
            schedule: r.schedule,
            warmup_steps: r.warmup_steps,
            steps: r.steps,
            weight_decay: r.weight_decay,
            lambda: r.lambda,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_eps: r.adam_eps,
            seed,
        }
    }

    pub fn flow_hyper(section: &FlowSection, seed: u64) -> FlowHyper {
        FlowHyper {
            batch_size: section.batch_size,
            lr: section.lr,
            steps: section.steps,
            grad_accum: section.grad_accum,
            weight_decay: section.weight_decay,
            warmup_steps: section.warmup_steps,
            schedule: section.schedule,
            seed,
        }
    }

    pub fn churn(&self) -> Result<ChurnParams, OrchestratorError> {
        let s_max = self
            .oft
            .s_max
            .trim()
            .parse::<f64>()
            .map_err(|_| OrchestratorError::Config(format!("oft.s_max: not a number: {:?}", self.oft.s_max)))?;
        let p = ChurnParams {
            s_churn: self.oft.s_churn,
            s_min: self.oft.s_min,
            s_max,
            s_noise: self.oft.s_noise,
        };
        p.validate().map_err(|e| OrchestratorError::Config(format!("oft: {e}")))?;
        Ok(p)
    }

    pub fn oft_config(&self, seed: u64) -> OftConfig {
        let o = &self.oft;
        OftConfig {
            beta: o.beta,
            batch_size: o.batch_size,
            lr: o.lr,
            steps: o.steps,
            grad_accum: o.grad_accum,
            prompts_per_epoch: o.prompts_per_epoch,
            prompt_pool: o.prompt_pool,
            images_per_prompt: o.images_per_prompt,
            weight_decay: o.weight_decay,
            n_steps: self.generator.sample_steps,
            churn: self.churn().unwrap_or_default(),
            shared_init: o.shared_init,
            use_mask: o.use_mask,
            mask_padding: o.mask_padding,
            step_subsample: o.step_subsample,
            eval_every: o.eval_every,
            eval_images_per_prompt: o.eval_images_per_prompt,
            seed,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.to_string());
        }
    }
}

/// JSON if it parses, otherwise the trimmed text as a string.
fn parse_value(text: &str) -> Value {
    let t = text.trim();
    serde_json::from_str(t).unwrap_or_else(|_| Value::String(t.to_string()))
}

/// `key = value` lines in file order; a key may appear only once.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, OrchestratorError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| OrchestratorError::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(OrchestratorError::Config(format!("line {}: empty key", i + 1)));
        }
        if !seen.insert(k.clone()) {
            return Err(OrchestratorError::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}
