//! Procedural "synthetic science world".
//!
//! Each task pairs subjects with conditions; the pair's scientifically correct
//! visual outcome (a color, a vertical position or a texture) comes from the
//! task's outcome map, while the superficial reading is the task's fixed
//! default prototype. Scenes are rendered at 32×32 with seeded nuisance
//! variation, so every downstream component has a ground-truth oracle.

mod catalog;
mod dataset;
mod image;
mod oracle;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{buoyancy_task, standard_world, SubjectSpec};
pub use dataset::{
    build_dataset, load_manifest, load_tuples, plan_dataset, DatasetConfig, DatasetManifest, ManifestRecord,
    SplitFractions,
};
pub use image::{RasterImage, WORLD_SIZE};
pub use oracle::{detect_subject_box, measure_attribute, oracle_verdict, Verdict};
pub use render::{render_scene, Complexity, PixelBox, Shape};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown subject token `{0}`")]
    UnknownSubject(String),
    #[error("unknown attribute token `{0}`")]
    UnknownAttribute(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}` has no outcome for (subject `{subject}`, condition `{condition}`)")]
    OutcomeMiss {
        task: String,
        subject: String,
        condition: String,
    },
    #[error("invalid task `{0}`: {1}")]
    InvalidTask(String, String),
    #[error("tuple identity {0} appears in more than one split")]
    DuplicateTuple(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("image codec error: {0}")]
    Image(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Physics,
    Chemistry,
    Biology,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Physics, Domain::Chemistry, Domain::Biology];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Physics => "physics",
            Domain::Chemistry => "chemistry",
            Domain::Biology => "biology",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    SubjectOriented,
    ConditionOriented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSimple,
    TestComplex,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSimple => "test_simple",
            Split::TestComplex => "test_complex",
        }
    }
}

impl FromStr for Split {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test_simple" => Ok(Split::TestSimple),
            "test_complex" => Ok(Split::TestComplex),
            other => Err(WorldError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Brown,
}

impl ColorName {
    pub const ALL: [ColorName; 7] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Orange,
        ColorName::Purple,
        ColorName::Brown,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [220, 40, 40],
            ColorName::Green => [40, 170, 60],
            ColorName::Blue => [50, 90, 220],
            ColorName::Yellow => [225, 205, 40],
            ColorName::Orange => [240, 140, 30],
            ColorName::Purple => [150, 60, 200],
            ColorName::Brown => [150, 85, 30],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Orange => "orange",
            ColorName::Purple => "purple",
            ColorName::Brown => "brown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Position {
    Top,
    Middle,
    Bottom,
}

impl Position {
    /// Nominal vertical center of the subject, in pixels.
    pub fn center_y(self) -> i32 {
        match self {
            Position::Top => 7,
            Position::Middle => 16,
            Position::Bottom => 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Texture {
    Plain,
    Striped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttributeKind {
    Color,
    Position,
    Texture,
}

/// A visual attribute of the subject. Serialized as its prompt word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Attribute {
    Color(ColorName),
    Position(Position),
    Texture(Texture),
}

impl Attribute {
    pub fn kind(self) -> AttributeKind {
        match self {
            Attribute::Color(_) => AttributeKind::Color,
            Attribute::Position(_) => AttributeKind::Position,
            Attribute::Texture(_) => AttributeKind::Texture,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Color(c) => c.word(),
            Attribute::Position(Position::Top) => "top-of-frame",
            Attribute::Position(Position::Middle) => "mid-frame",
            Attribute::Position(Position::Bottom) => "bottom-of-frame",
            Attribute::Texture(Texture::Plain) => "plain",
            Attribute::Texture(Texture::Striped) => "striped",
        }
    }

    pub fn all() -> Vec<Attribute> {
        let mut v: Vec<Attribute> = ColorName::ALL.iter().map(|&c| Attribute::Color(c)).collect();
        v.extend([Position::Top, Position::Middle, Position::Bottom].map(Attribute::Position));
        v.extend([Texture::Plain, Texture::Striped].map(Attribute::Texture));
        v
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Attribute {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::all()
            .into_iter()
            .find(|a| a.word() == s)
            .ok_or_else(|| WorldError::UnknownAttribute(s.to_string()))
    }
}

impl TryFrom<String> for Attribute {
    type Error = WorldError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Attribute> for String {
    fn from(a: Attribute) -> String {
        a.word().to_string()
    }
}

/// One task family: subjects × conditions with a total outcome map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub domain: Domain,
    pub orientation: Orientation,
    pub subjects: Vec<String>,
    pub conditions: Vec<String>,
    /// subject → condition → attribute.
    pub outcome_map: BTreeMap<String, BTreeMap<String, Attribute>>,
    /// The default visual prototype used for every superficial prompt and image.
    pub superficial: Attribute,
    /// Implicit prompt template with `{subject}` and `{condition}` slots.
    pub implicit_template: String,
}

impl TaskSpec {
    pub fn kind(&self) -> AttributeKind {
        self.superficial.kind()
    }

    pub fn outcome(&self, subject: &str, condition: &str) -> Result<Attribute, WorldError> {
        self.outcome_map
            .get(subject)
            .and_then(|m| m.get(condition))
            .copied()
            .ok_or_else(|| WorldError::OutcomeMiss {
                task: self.task_id.clone(),
                subject: subject.to_string(),
                condition: condition.to_string(),
            })
    }

    pub fn combos(&self) -> impl Iterator<Item = (&str, &str)> {
        self.subjects
            .iter()
            .flat_map(move |s| self.conditions.iter().map(move |c| (s.as_str(), c.as_str())))
    }

    /// Checks totality, the ST/CT structure and that outcomes differ from the prototype.
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |msg: String| Err(WorldError::InvalidTask(self.task_id.clone(), msg));
        if self.subjects.is_empty() || self.conditions.is_empty() {
            return bad("needs at least one subject and one condition".into());
        }
        for (s, c) in self.combos() {
            let a = self.outcome(s, c)?;
            if a.kind() != self.kind() {
                return bad(format!("outcome `{a}` for ({s}, {c}) has the wrong attribute kind"));
            }
            if a == self.superficial {
                return bad(format!("outcome for ({s}, {c}) equals the superficial prototype"));
            }
        }
        match self.orientation {
            Orientation::ConditionOriented => {
                for c in &self.conditions {
                    let first = self.outcome(&self.subjects[0], c)?;
                    for s in &self.subjects {
                        if self.outcome(s, c)? != first {
                            return bad(format!("condition `{c}` does not fix the attribute"));
                        }
                    }
                }
            }
            Orientation::SubjectOriented => {
                let distinct = self.conditions.iter().any(|c| {
                    let outs: std::collections::BTreeSet<_> =
                        self.subjects.iter().filter_map(|s| self.outcome(s, c).ok()).collect();
                    outs.len() >= 2
                });
                if !distinct {
                    return bad("no condition separates two subjects".into());
                }
            }
        }
        if !self.implicit_template.contains("{subject}") || !self.implicit_template.contains("{condition}") {
            return bad("implicit template needs {subject} and {condition} slots".into());
        }
        Ok(())
    }

    pub fn implicit_prompt(&self, subject: &str, condition: &str) -> String {
        self.implicit_template
            .replace("{subject}", subject)
            .replace("{condition}", condition)
    }

    /// Prompt that names `attribute` directly.
    pub fn attribute_prompt(&self, subject: &str, attribute: Attribute) -> String {
        match attribute.kind() {
            AttributeKind::Position => format!("a {subject} {}", attribute.word()),
            _ => format!("a {} {subject}", attribute.word()),
        }
    }
}

/// The full world: tasks, subject appearances and scene contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub tasks: Vec<TaskSpec>,
    pub subjects: BTreeMap<String, SubjectSpec>,
    /// Context phrases appended to prompts of complex scenes.
    pub contexts: Vec<String>,
}

impl World {
    pub fn task(&self, task_id: &str) -> Result<&TaskSpec, WorldError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| WorldError::UnknownTask(task_id.to_string()))
    }

    pub fn subject(&self, name: &str) -> Result<&SubjectSpec, WorldError> {
        self.subjects
            .get(name)
            .ok_or_else(|| WorldError::UnknownSubject(name.to_string()))
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        for t in &self.tasks {
            t.validate()?;
            for s in &t.subjects {
                self.subject(s)?;
            }
        }
        Ok(())
    }

    /// Closed, sorted prompt vocabulary.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = std::collections::BTreeSet::new();
        let mut add = |s: &str| {
            for w in s.split_whitespace() {
                words.insert(w.to_string());
            }
        };
        for t in &self.tasks {
            for (s, c) in t.combos() {
                add(&t.implicit_prompt(s, c));
            }
            for s in &t.subjects {
                for a in Attribute::all() {
                    if a.kind() == t.kind() {
                        add(&t.attribute_prompt(s, a));
                    }
                }
            }
        }
        for c in &self.contexts {
            add(c);
        }
        words.into_iter().collect()
    }

    /// Builds the tuple for one (task, subject, condition) combination.
    pub fn realize_tuple(
        &self,
        task: &TaskSpec,
        subject: &str,
        condition: &str,
        complexity: Complexity,
        seed: u64,
    ) -> Result<SciTuple, WorldError> {
        let explicit_attribute = task.outcome(subject, condition)?;
        let superficial_attribute = task.superficial;
        let context = match complexity {
            Complexity::Simple => None,
            Complexity::Complex => {
                let idx = (crate::rng::mix(&[seed, 0xC0]) % self.contexts.len().max(1) as u64) as usize;
                self.contexts.get(idx).cloned()
            }
        };
        let with_context = |p: String| match &context {
            Some(c) => format!("{p} {c}"),
            None => p,
        };
        let (explicit_image, subject_box) = render_scene(self, subject, explicit_attribute, complexity, seed)?;
        let (superficial_image, _) = render_scene(self, subject, superficial_attribute, complexity, seed)?;
        Ok(SciTuple {
            id: String::new(),
            task_id: task.task_id.clone(),
            domain: task.domain,
            orientation: task.orientation,
            subject: subject.to_string(),
            condition: condition.to_string(),
            complexity,
            variant: 0,
            nuisance_seed: seed,
            split: Split::Train,
            implicit_prompt: with_context(task.implicit_prompt(subject, condition)),
            explicit_prompt: with_context(task.attribute_prompt(subject, explicit_attribute)),
            superficial_prompt: with_context(task.attribute_prompt(subject, superficial_attribute)),
            explicit_attribute,
            superficial_attribute,
            subject_box,
            explicit_image,
            superficial_image,
        })
    }
}

/// One training/benchmark unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SciTuple {
    pub id: String,
    pub task_id: String,
    pub domain: Domain,
    pub orientation: Orientation,
    pub subject: String,
    pub condition: String,
    pub complexity: Complexity,
    pub variant: u32,
    pub nuisance_seed: u64,
    pub split: Split,
    pub implicit_prompt: String,
    pub explicit_prompt: String,
    pub superficial_prompt: String,
    pub explicit_attribute: Attribute,
    pub superficial_attribute: Attribute,
    pub subject_box: PixelBox,
    pub explicit_image: RasterImage,
    pub superficial_image: RasterImage,
}
