use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BenchError, GradingRubric};
use crate::http::{image_base64, post_json, DEFAULT_TIMEOUT};
use crate::reward::RewardModel;
use crate::synthworld::{oracle_verdict, RasterImage, SciTuple, Verdict};

pub const JUDGE_URL_ENV: &str = "SCIALIGN_JUDGE_URL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub scene: i64,
    pub reality: i64,
    pub rationale: String,
}

pub trait Judge {
    fn id(&self) -> &str;
    fn judge(&self, image: &RasterImage, rubric: &GradingRubric) -> Result<JudgeVerdict, BenchError>;
}

/// Grades synthetic-world images by measuring the rendered attribute:
/// explicit-like → (2, 3), superficial-like → (2, 0), neither → (0, 0).
pub struct OracleJudge {
    by_prompt: HashMap<String, SciTuple>,
}

impl OracleJudge {
    pub fn new(tuples: &[SciTuple]) -> Self {
        Self {
            by_prompt: tuples.iter().map(|t| (t.implicit_prompt.clone(), t.clone())).collect(),
        }
    }
}

impl Judge for OracleJudge {
    fn id(&self) -> &str {
        "oracle"
    }

    fn judge(&self, image: &RasterImage, rubric: &GradingRubric) -> Result<JudgeVerdict, BenchError> {
        let t = self.by_prompt.get(&rubric.prompt).ok_or_else(|| BenchError::Protocol {
            judge: self.id().to_string(),
            message: format!("no world tuple for prompt {:?}", rubric.prompt),
        })?;
        let (scene, reality, why) = match oracle_verdict(t, image) {
            Verdict::ExplicitLike => (2, 3, "subject shows the implied attribute"),
            Verdict::SuperficialLike => (2, 0, "subject shows the everyday attribute"),
            Verdict::Neither => (0, 0, "no measurable subject attribute"),
        };
        Ok(JudgeVerdict {
            scene,
            reality,
            rationale: why.to_string(),
        })
    }
}

/// Instruction sent to external multimodal judges. Slots: `{prompt}`,
/// `{scene}`, `{reality}`, `{image}`.
pub const INSTRUCTION_TEMPLATE: &str = "You are grading a generated image as an experienced scientist. \
First check the image against the scene criteria. If they are not met in full, the reality score is 0. \
If they are met, grade how realistic the depicted phenomenon is with the reality criteria, ignoring style \
and minor background details. Describe the image in detail first, then apply the criteria strictly.\n\
Input: {\"Prompt\": \"{prompt}\", \"Scene Grading\": \"{scene}\", \"Reality Grading\": \"{reality}\", \"Image\": {image}}\n\
Output format: {\"description\": , \"scene score\": , \"reality score\": }";

pub fn render_instruction(rubric: &GradingRubric, image_slot: &str) -> String {
    INSTRUCTION_TEMPLATE
        .replace("{prompt}", &rubric.prompt)
        .replace("{scene}", &rubric.scene_text())
        .replace("{reality}", &rubric.reality_text())
        .replace("{image}", image_slot)
}

/// Reads an integer following `key` (case-insensitive), skipping quotes, colons and spaces.
fn score_after(text: &str, key: &str) -> Option<i64> {
    let lower = text.to_lowercase();
    let at = lower.find(key)? + key.len();
    let rest = lower[at..].trim_start_matches(|c: char| c == '"' || c == ':' || c.is_whitespace());
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit() || *c == '-').collect();
    digits.parse().ok()
}

/// Parses `{"description": …, "scene score": n, "reality score": m}`-style replies.
pub(crate) fn parse_verdict(text: &str) -> Option<JudgeVerdict> {
    let scene = score_after(text, "scene score").or_else(|| score_after(text, "scene_score"))?;
    let reality = score_after(text, "reality score").or_else(|| score_after(text, "reality_score"))?;
    Some(JudgeVerdict {
        scene,
        reality,
        rationale: text.to_string(),
    })
}

#[derive(Serialize)]
struct JudgeRequest {
    instruction: String,
    image: String,
}

#[derive(Deserialize)]
struct JudgeResponse {
    output: String,
}

/// External judge over JSON-over-HTTP: `POST {"instruction", "image"}` → `{"output"}`.
/// An unparseable reply is retried once.
#[derive(Clone, Debug)]
pub struct HttpJudge {
    pub endpoint: String,
    pub name: String,
    pub timeout: Duration,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            name: "http".to_string(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(JUDGE_URL_ENV).ok().map(Self::new)
    }

    fn protocol(&self, message: String) -> BenchError {
        BenchError::Protocol {
            judge: self.name.clone(),
            message,
        }
    }
}

impl Judge for HttpJudge {
    fn id(&self) -> &str {
        &self.name
    }

    fn judge(&self, image: &RasterImage, rubric: &GradingRubric) -> Result<JudgeVerdict, BenchError> {
        let req = JudgeRequest {
            instruction: render_instruction(rubric, "<attached>"),
            image: image_base64(image).map_err(|e| self.protocol(e))?,
        };
        let mut last = String::new();
        for _ in 0..2 {
            let r: JudgeResponse = post_json(&self.endpoint, &req, self.timeout).map_err(|e| self.protocol(e))?;
            if let Some(v) = parse_verdict(&r.output) {
                return Ok(v);
            }
            last = r.output;
        }
        Err(self.protocol(format!("unparseable reply after retry: {last:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    First,
    Second,
}

/// Chooses which of two ordered images better fits a prompt.
pub trait TwoChoiceJudge {
    fn id(&self) -> &str;
    fn pick(&self, prompt: &str, first: &RasterImage, second: &RasterImage) -> Result<Slot, BenchError>;
}

/// Picks the higher-scoring image; ties go to the first slot.
pub struct RewardTwoChoice<'a> {
    pub reward: &'a dyn RewardModel,
    pub name: String,
}

impl TwoChoiceJudge for RewardTwoChoice<'_> {
    fn id(&self) -> &str {
        &self.name
    }

    fn pick(&self, prompt: &str, first: &RasterImage, second: &RasterImage) -> Result<Slot, BenchError> {
        let s = self.reward.score_batch(prompt, &[first, second])?;
        Ok(if s[1] > s[0] { Slot::Second } else { Slot::First })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoChoiceOutcome {
    /// Mean correctness over both orders: 0, 0.5 or 1.
    pub score: f64,
    /// Whether the judge picked the same image in both orders.
    pub consistent: bool,
}

/// Asks in both orders and averages correctness.
pub fn order_swapped_two_choice(
    judge: &dyn TwoChoiceJudge,
    prompt: &str,
    correct: &RasterImage,
    incorrect: &RasterImage,
) -> Result<TwoChoiceOutcome, BenchError> {
    let a = judge.pick(prompt, correct, incorrect)? == Slot::First;
    let b = judge.pick(prompt, incorrect, correct)? == Slot::Second;
    Ok(TwoChoiceOutcome {
        score: (a as u8 + b as u8) as f64 / 2.0,
        consistent: a == b,
    })
}
