use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{grade, normalized_score, BenchError, GradeRecord, GradingRubric, Judge};
use crate::flow::{ode_sample, VelocityModel};
use crate::reward::RewardModel;
use crate::rng::{hash_str, mix};
use crate::synthworld::{RasterImage, SciTuple};

/// Text-to-image model under evaluation.
pub trait ImageGenerator {
    fn id(&self) -> String;
    fn generate(&self, prompt: &str, seed: u64) -> Result<RasterImage, BenchError>;
}

/// Deterministic ODE sampling from a velocity model.
pub struct FlowGenerator<'a> {
    pub model: &'a VelocityModel,
    pub n_steps: usize,
    pub name: String,
}

impl ImageGenerator for FlowGenerator<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<RasterImage, BenchError> {
        Ok(ode_sample(self.model, prompt, self.n_steps, seed)?)
    }
}

/// Which tuple prompt conditions generation. Grading always uses the implicit prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Implicit,
    Explicit,
}

impl PromptKind {
    fn pick(self, t: &SciTuple) -> &str {
        match self {
            PromptKind::Implicit => &t.implicit_prompt,
            PromptKind::Explicit => &t.explicit_prompt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub model_id: String,
    pub split_id: String,
    pub judge_id: String,
    pub prompt_kind: PromptKind,
    pub n_prompts: usize,
    pub images_per_prompt: usize,
    pub n_images: usize,
    pub failed_prompts: Vec<String>,
    /// Normalized reality score in `[0, 100]`.
    pub overall: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub per_task: BTreeMap<String, f64>,
    pub seed: u64,
}

fn image_seed(seed: u64, t: &SciTuple, j: usize) -> u64 {
    mix(&[seed, hash_str(&t.implicit_prompt), t.nuisance_seed, j as u64])
}

fn dedup_prompts(tuples: &[SciTuple]) -> Vec<&SciTuple> {
    let mut seen = std::collections::HashSet::new();
    tuples.iter().filter(|t| seen.insert(t.implicit_prompt.as_str())).collect()
}

/// Generates `images_per_prompt` images per distinct implicit prompt, grades
/// them against the tuple rubric and aggregates. A prompt whose generation fails
/// is excluded from the scores and listed in `failed_prompts`.
pub fn run_benchmark(
    generator: &dyn ImageGenerator,
    tuples: &[SciTuple],
    split_id: &str,
    kind: PromptKind,
    images_per_prompt: usize,
    judge: &dyn Judge,
    seed: u64,
) -> Result<BenchmarkReport, BenchError> {
    let items = dedup_prompts(tuples);
    if items.is_empty() || images_per_prompt == 0 {
        return Err(BenchError::Empty("benchmark split"));
    }
    let mut all = Vec::new();
    let mut by_domain: BTreeMap<String, Vec<GradeRecord>> = BTreeMap::new();
    let mut by_task: BTreeMap<String, Vec<GradeRecord>> = BTreeMap::new();
    let mut failed = Vec::new();
    'prompts: for t in &items {
        let rubric = GradingRubric::for_tuple(t);
        let mut records = Vec::with_capacity(images_per_prompt);
        for j in 0..images_per_prompt {
            let image = match generator.generate(kind.pick(t), image_seed(seed, t, j)) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("generation failed for {:?}: {e}", t.implicit_prompt);
                    failed.push(t.implicit_prompt.clone());
                    continue 'prompts;
                }
            };
            records.push(grade(judge, &image, &rubric, &format!("{}#{j}", t.id))?);
        }
        by_domain.entry(t.domain.as_str().to_string()).or_default().extend(records.iter().cloned());
        by_task.entry(t.task_id.clone()).or_default().extend(records.iter().cloned());
        all.extend(records);
    }
    Ok(BenchmarkReport {
        model_id: generator.id(),
        split_id: split_id.to_string(),
        judge_id: judge.id().to_string(),
        prompt_kind: kind,
        n_prompts: items.len(),
        images_per_prompt,
        n_images: all.len(),
        failed_prompts: failed,
        overall: normalized_score(&all),
        per_domain: by_domain.iter().map(|(k, v)| (k.clone(), normalized_score(v))).collect(),
        per_task: by_task.iter().map(|(k, v)| (k.clone(), normalized_score(v))).collect(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBenchmark {
    pub model_id: String,
    pub prompt_kind: PromptKind,
    /// Mean reward of generated images against their implicit prompts.
    pub mean: f64,
    pub n_images: usize,
    pub failed_prompts: Vec<String>,
}

/// Mean reward-model score of generated images, scored against the implicit prompt.
pub fn reward_benchmark(
    generator: &dyn ImageGenerator,
    tuples: &[SciTuple],
    kind: PromptKind,
    images_per_prompt: usize,
    reward: &dyn RewardModel,
    seed: u64,
) -> Result<RewardBenchmark, BenchError> {
    let items = dedup_prompts(tuples);
    if items.is_empty() || images_per_prompt == 0 {
        return Err(BenchError::Empty("benchmark split"));
    }
    let (mut total, mut n, mut failed) = (0.0, 0usize, Vec::new());
    'prompts: for t in &items {
        let mut images = Vec::with_capacity(images_per_prompt);
        for j in 0..images_per_prompt {
            match generator.generate(kind.pick(t), image_seed(seed, t, j)) {
                Ok(img) => images.push(img),
                Err(e) => {
                    log::warn!("generation failed for {:?}: {e}", t.implicit_prompt);
                    failed.push(t.implicit_prompt.clone());
                    continue 'prompts;
                }
            }
        }
        let refs: Vec<&RasterImage> = images.iter().collect();
        total += reward.score_batch(&t.implicit_prompt, &refs)?.iter().sum::<f64>();
        n += images.len();
    }
    Ok(RewardBenchmark {
        model_id: generator.id(),
        prompt_kind: kind,
        mean: if n > 0 { total / n as f64 } else { 0.0 },
        n_images: n,
        failed_prompts: failed,
    })
}

/// `(fine_ip − base_ip) / (base_ep − base_ip)`.
pub fn relative_improvement(base_ip: f64, base_ep: f64, fine_ip: f64) -> Result<f64, BenchError> {
    let den = base_ep - base_ip;
    if den == 0.0 {
        return Err(BenchError::UndefinedMetric(base_ep));
    }
    Ok((fine_ip - base_ip) / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ri_endpoints() {
        assert_eq!(relative_improvement(20.0, 30.0, 20.0).unwrap(), 0.0);
        assert_eq!(relative_improvement(20.0, 30.0, 30.0).unwrap(), 1.0);
        assert!(relative_improvement(20.0, 30.0, 35.0).unwrap() > 1.0);
        assert!(matches!(relative_improvement(5.0, 5.0, 7.0), Err(BenchError::UndefinedMetric(_))));
    }
}
