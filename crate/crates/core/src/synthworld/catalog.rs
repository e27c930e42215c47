use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Attribute, ColorName, Domain, Orientation, Position, Shape, TaskSpec, Texture, World};

/// How a subject looks when no attribute overrides it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub base_color: ColorName,
}

fn task(
    task_id: &str,
    domain: Domain,
    orientation: Orientation,
    template: &str,
    superficial: Attribute,
    conditions: &[&str],
    outcomes: &[(&str, Attribute)],
    per_condition: Option<&dyn Fn(&str) -> Attribute>,
) -> TaskSpec {
    let subjects: Vec<String> = outcomes.iter().map(|(s, _)| s.to_string()).collect();
    let conditions: Vec<String> = conditions.iter().map(|c| c.to_string()).collect();
    let mut outcome_map = BTreeMap::new();
    for (s, a) in outcomes {
        let row: BTreeMap<String, Attribute> = conditions
            .iter()
            .map(|c| (c.clone(), per_condition.map_or(*a, |f| f(c))))
            .collect();
        outcome_map.insert(s.to_string(), row);
    }
    TaskSpec {
        task_id: task_id.to_string(),
        domain,
        orientation,
        subjects,
        conditions,
        outcome_map,
        superficial,
        implicit_template: template.to_string(),
    }
}

/// A buoyancy task over `(subject, density)` pairs: lighter than water floats, denser sinks.
pub fn buoyancy_task(subjects: &[(&str, f64)]) -> TaskSpec {
    let outcomes: Vec<(&str, Attribute)> = subjects
        .iter()
        .map(|&(s, density)| {
            let pos = if density < 1.0 { Position::Top } else { Position::Bottom };
            (s, Attribute::Position(pos))
        })
        .collect();
    task(
        "buoyancy",
        Domain::Physics,
        Orientation::SubjectOriented,
        "a {subject} {condition}",
        Attribute::Position(Position::Middle),
        &["dropped in water", "in a pond", "in a bathtub"],
        &outcomes,
        None,
    )
}

/// The seven-task world used by default.
pub fn standard_world() -> World {
    use Attribute::{Color, Position as Pos, Texture as Tex};
    use ColorName::*;

    let gravity = task(
        "gravity",
        Domain::Physics,
        Orientation::ConditionOriented,
        "a {subject} {condition}",
        Pos(Position::Bottom),
        &["in orbit", "in zero-gravity", "aboard a spacestation"],
        &[
            ("ball", Pos(Position::Top)),
            ("cube", Pos(Position::Top)),
            ("bottle", Pos(Position::Top)),
            ("cone", Pos(Position::Top)),
            ("gem", Pos(Position::Top)),
            ("can", Pos(Position::Top)),
        ],
        None,
    );
    let buoyancy = buoyancy_task(&[
        ("cork", 0.24),
        ("log", 0.6),
        ("iceblock", 0.92),
        ("apple", 0.8),
        ("pebble", 2.6),
        ("anchor", 7.8),
        ("coin", 8.9),
        ("brick", 1.9),
    ]);
    let flame = task(
        "flame",
        Domain::Chemistry,
        Orientation::SubjectOriented,
        "{subject} {condition}",
        Color(Orange),
        &["in a flame", "in a flame test", "heated in a burner"],
        &[
            ("copper", Color(Blue)),
            ("sodium", Color(Yellow)),
            ("potassium", Color(Purple)),
            ("lithium", Color(Red)),
            ("barium", Color(Green)),
            ("strontium", Color(Red)),
        ],
        None,
    );
    let litmus = task(
        "litmus",
        Domain::Chemistry,
        Orientation::SubjectOriented,
        "litmus paper {condition} {subject}",
        Color(Purple),
        &["dipped in", "soaked in", "touched with"],
        &[
            ("vinegar", Color(Red)),
            ("lemon-juice", Color(Red)),
            ("cola", Color(Red)),
            ("soap", Color(Blue)),
            ("bleach", Color(Blue)),
            ("ammonia", Color(Blue)),
        ],
        None,
    );
    let freezing = task(
        "freezing",
        Domain::Chemistry,
        Orientation::ConditionOriented,
        "a glass of {subject} {condition}",
        Tex(Texture::Plain),
        &["at minus twenty degrees", "left in a freezer", "outside on a frozen night"],
        &[
            ("lemonade", Tex(Texture::Striped)),
            ("juice", Tex(Texture::Striped)),
            ("soda", Tex(Texture::Striped)),
            ("tea", Tex(Texture::Striped)),
            ("smoothie", Tex(Texture::Striped)),
            ("mouthwash", Tex(Texture::Striped)),
        ],
        None,
    );
    let ripeness_outcome = |c: &str| match c {
        "unripe" => Color(Green),
        _ => Color(Brown),
    };
    let ripeness = task(
        "ripeness",
        Domain::Biology,
        Orientation::ConditionOriented,
        "a {condition} {subject}",
        Color(Red),
        &["unripe", "rotten"],
        &[
            ("apple", Color(Green)),
            ("tomato", Color(Green)),
            ("mango", Color(Green)),
            ("pear", Color(Green)),
            ("plum", Color(Green)),
            ("banana", Color(Green)),
        ],
        Some(&ripeness_outcome),
    );
    let etiolation = task(
        "etiolation",
        Domain::Biology,
        Orientation::ConditionOriented,
        "a {subject} {condition}",
        Color(Green),
        &["grown in darkness", "kept in a closet", "covered for weeks"],
        &[
            ("sprout", Color(Yellow)),
            ("seedling", Color(Yellow)),
            ("fern", Color(Yellow)),
            ("grass", Color(Yellow)),
            ("clover", Color(Yellow)),
            ("beanstalk", Color(Yellow)),
        ],
        None,
    );

    let look = |shape, base_color| SubjectSpec { shape, base_color };
    let subjects: BTreeMap<String, SubjectSpec> = [
        ("ball", look(Shape::Disc, Red)),
        ("cube", look(Shape::Square, Blue)),
        ("bottle", look(Shape::Bar, Green)),
        ("cone", look(Shape::Triangle, Orange)),
        ("gem", look(Shape::Diamond, Purple)),
        ("can", look(Shape::Bar, Yellow)),
        ("cork", look(Shape::Disc, Brown)),
        ("log", look(Shape::Bar, Brown)),
        ("iceblock", look(Shape::Square, Blue)),
        ("apple", look(Shape::Disc, Red)),
        ("pebble", look(Shape::Disc, Purple)),
        ("anchor", look(Shape::Triangle, Red)),
        ("coin", look(Shape::Disc, Yellow)),
        ("brick", look(Shape::Square, Orange)),
        ("copper", look(Shape::Triangle, Orange)),
        ("sodium", look(Shape::Triangle, Orange)),
        ("potassium", look(Shape::Triangle, Orange)),
        ("lithium", look(Shape::Triangle, Orange)),
        ("barium", look(Shape::Triangle, Orange)),
        ("strontium", look(Shape::Triangle, Orange)),
        ("vinegar", look(Shape::Bar, Purple)),
        ("lemon-juice", look(Shape::Bar, Purple)),
        ("cola", look(Shape::Bar, Purple)),
        ("soap", look(Shape::Bar, Purple)),
        ("bleach", look(Shape::Bar, Purple)),
        ("ammonia", look(Shape::Bar, Purple)),
        ("lemonade", look(Shape::Square, Yellow)),
        ("juice", look(Shape::Square, Orange)),
        ("soda", look(Shape::Square, Purple)),
        ("tea", look(Shape::Square, Red)),
        ("smoothie", look(Shape::Square, Green)),
        ("mouthwash", look(Shape::Square, Blue)),
        ("tomato", look(Shape::Disc, Red)),
        ("mango", look(Shape::Diamond, Orange)),
        ("pear", look(Shape::Triangle, Green)),
        ("plum", look(Shape::Disc, Purple)),
        ("banana", look(Shape::Bar, Yellow)),
        ("sprout", look(Shape::Triangle, Green)),
        ("seedling", look(Shape::Bar, Green)),
        ("fern", look(Shape::Diamond, Green)),
        ("grass", look(Shape::Bar, Green)),
        ("clover", look(Shape::Disc, Green)),
        ("beanstalk", look(Shape::Square, Green)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    World {
        tasks: vec![gravity, buoyancy, flame, litmus, freezing, ripeness, etiolation],
        subjects,
        contexts: ["in a bedroom", "on the street", "in a kitchen", "at the park"]
            .map(String::from)
            .to_vec(),
    }
}
