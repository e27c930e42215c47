//! Rubric-graded benchmark harness.
//!
//! A judge returns a Scene Score (0–2) and a raw Reality Score (0–3) per image.
//! Reality only counts when the scene is complete (SS = 2); the report is the
//! mean gated reality rescaled to `[0, 100]`.

mod judge;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use judge::{
    order_swapped_two_choice, render_instruction, HttpJudge, Judge, JudgeVerdict, OracleJudge, RewardTwoChoice, Slot,
    TwoChoiceJudge, TwoChoiceOutcome, INSTRUCTION_TEMPLATE,
};
pub use run::{
    relative_improvement, reward_benchmark, run_benchmark, BenchmarkReport, FlowGenerator, ImageGenerator, PromptKind,
    RewardBenchmark,
};

use crate::flow::FlowError;
use crate::reward::RewardError;
use crate::synthworld::{SciTuple, RasterImage};

pub const SCENE_MAX: u8 = 2;
pub const REALITY_MAX: u8 = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("judge {judge} returned out-of-range scores (scene {scene}, reality {reality})")]
    ScoreRange { judge: String, scene: i64, reality: i64 },
    #[error("judge {judge}: {message}")]
    Protocol { judge: String, message: String },
    #[error("relative improvement undefined: base explicit and implicit scores are both {0}")]
    UndefinedMetric(f64),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Criteria text for one implicit prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradingRubric {
    pub prompt: String,
    /// Descriptions for scene scores 0, 1, 2.
    pub scene: [String; 3],
    /// Descriptions for reality scores 0, 1, 2, 3.
    pub reality: [String; 4],
}

impl GradingRubric {
    pub fn for_tuple(t: &SciTuple) -> Self {
        let subject = &t.subject;
        let good = t.explicit_attribute.word();
        let bad = t.superficial_attribute.word();
        Self {
            prompt: t.implicit_prompt.clone(),
            scene: [
                format!("no {subject} is visible"),
                format!("a {subject} is only partly visible or hard to make out"),
                format!("a {subject} is clearly visible"),
            ],
            reality: [
                format!("the {subject} looks {bad}, the everyday appearance that ignores the condition"),
                format!("the {subject} shows no recognisable {good} appearance"),
                format!("the {subject} is mostly {good} with visible flaws"),
                format!("the {subject} is clearly {good}"),
            ],
        }
    }

    pub fn scene_text(&self) -> String {
        numbered(&self.scene)
    }

    pub fn reality_text(&self) -> String {
        numbered(&self.reality)
    }
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i} points: {s}."))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub scene_score: u8,
    pub raw_reality: u8,
    pub gated_reality: u8,
    pub judge_id: String,
    pub image_ref: String,
}

impl GradeRecord {
    /// Applies the scene gate: reality counts only at full scene score.
    pub fn gated(scene_score: u8, raw_reality: u8, judge_id: &str, image_ref: &str) -> Self {
        Self {
            scene_score,
            raw_reality,
            gated_reality: if scene_score >= SCENE_MAX { raw_reality } else { 0 },
            judge_id: judge_id.to_string(),
            image_ref: image_ref.to_string(),
        }
    }
}

/// Grades one image and applies the gate.
pub fn grade(judge: &dyn Judge, image: &RasterImage, rubric: &GradingRubric, image_ref: &str) -> Result<GradeRecord, BenchError> {
    let v = judge.judge(image, rubric)?;
    if !(0..=SCENE_MAX as i64).contains(&v.scene) || !(0..=REALITY_MAX as i64).contains(&v.reality) {
        return Err(BenchError::ScoreRange {
            judge: judge.id().to_string(),
            scene: v.scene,
            reality: v.reality,
        });
    }
    Ok(GradeRecord::gated(v.scene as u8, v.reality as u8, judge.id(), image_ref))
}

/// `mean(gated reality) / 3 · 100`; 0 for no records.
pub fn normalized_score(records: &[GradeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let sum: f64 = records.iter().map(|r| r.gated_reality as f64).sum();
    sum / records.len() as f64 / REALITY_MAX as f64 * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_and_normalization() {
        let r = GradeRecord::gated(1, 3, "j", "i");
        assert_eq!(r.gated_reality, 0);
        let r = GradeRecord::gated(2, 3, "j", "i");
        assert_eq!(r.gated_reality, 3);
        let half: Vec<_> = [3u8, 0, 3, 0].iter().map(|&x| GradeRecord::gated(2, x, "j", "i")).collect();
        assert!((normalized_score(&half) - 50.0).abs() < 1e-12);
        let full: Vec<_> = (0..5).map(|_| GradeRecord::gated(2, 3, "j", "i")).collect();
        assert_eq!(normalized_score(&full), 100.0);
        assert_eq!(normalized_score(&[]), 0.0);
    }
}
