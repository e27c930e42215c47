use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RewardError, RewardModel};
use crate::synthworld::{RasterImage, SciTuple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

/// Picks the image with the higher reward; exact ties go to `A`.
pub fn two_choice_select(
    model: &dyn RewardModel,
    prompt: &str,
    image_a: &RasterImage,
    image_b: &RasterImage,
) -> Result<Choice, RewardError> {
    let r = model.score_batch(prompt, &[image_a, image_b])?;
    Ok(if r[1] > r[0] { Choice::B } else { Choice::A })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_tuples: usize,
    pub overall: f64,
    pub per_task: BTreeMap<String, GroupAccuracy>,
    pub per_domain: BTreeMap<String, GroupAccuracy>,
}

fn finish(groups: BTreeMap<String, (usize, usize)>) -> BTreeMap<String, GroupAccuracy> {
    groups
        .into_iter()
        .map(|(k, (hit, n))| {
            (
                k,
                GroupAccuracy {
                    accuracy: 100.0 * hit as f64 / n as f64,
                    n,
                },
            )
        })
        .collect()
}

/// Two-choice accuracy (percent) of picking the explicit image for each tuple's implicit prompt.
pub fn evaluate_accuracy(model: &dyn RewardModel, tuples: &[SciTuple], split: &str) -> Result<EvalReport, RewardError> {
    if tuples.is_empty() {
        return Err(RewardError::Empty("evaluation split"));
    }
    let mut tasks: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut domains: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for t in tuples {
        let hit = two_choice_select(model, &t.implicit_prompt, &t.explicit_image, &t.superficial_image)? == Choice::A;
        hits += hit as usize;
        for (map, key) in [(&mut tasks, t.task_id.clone()), (&mut domains, t.domain.as_str().to_string())] {
            let e = map.entry(key).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    Ok(EvalReport {
        split: split.to_string(),
        n_tuples: tuples.len(),
        overall: 100.0 * hits as f64 / tuples.len() as f64,
        per_task: finish(tasks),
        per_domain: finish(domains),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{DualEncoder, DualEncoderConfig};
    use crate::synthworld::{oracle_verdict, plan_dataset, standard_world, DatasetConfig, Verdict};

    /// Scores an image 1 if the world oracle calls it explicit for the prompt's tuple.
    struct OracleScorer<'a> {
        tuples: &'a [SciTuple],
    }

    impl RewardModel for OracleScorer<'_> {
        fn score_batch(&self, prompt: &str, images: &[&RasterImage]) -> Result<Vec<f64>, RewardError> {
            let t = self.tuples.iter().find(|t| t.implicit_prompt == prompt).unwrap();
            Ok(images
                .iter()
                .map(|img| (oracle_verdict(t, img) == Verdict::ExplicitLike) as u8 as f64)
                .collect())
        }
    }

    struct Fixed(f64, f64);

    impl RewardModel for Fixed {
        fn score_batch(&self, _: &str, _: &[&RasterImage]) -> Result<Vec<f64>, RewardError> {
            Ok(vec![self.0, self.1])
        }
    }

    fn tuples() -> Vec<SciTuple> {
        plan_dataset(
            &standard_world(),
            &DatasetConfig {
                variants_per_combo: 2,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn argmax_contract_and_monotone_invariance() {
        let img = RasterImage::filled(2, 2, [0, 0, 0]);
        assert_eq!(two_choice_select(&Fixed(2.0, 1.0), "p", &img, &img).unwrap(), Choice::A);
        assert_eq!(two_choice_select(&Fixed(1.0, 2.0), "p", &img, &img).unwrap(), Choice::B);
        assert_eq!(two_choice_select(&Fixed(1.0, 1.0), "p", &img, &img).unwrap(), Choice::A);
        for (a, b) in [(0.3, -1.2), (-4.0, 2.5), (0.0, 0.1)] {
            let base = two_choice_select(&Fixed(a, b), "p", &img, &img).unwrap();
            for (s, c) in [(2.0, 1.0), (0.1, -7.0), (13.0, 100.0)] {
                assert_eq!(two_choice_select(&Fixed(s * a + c, s * b + c), "p", &img, &img).unwrap(), base);
            }
        }
    }

    #[test]
    fn oracle_scorer_is_perfect_and_report_is_consistent() {
        let ts = tuples();
        let report = evaluate_accuracy(&OracleScorer { tuples: &ts }, &ts, "all").unwrap();
        assert_eq!(report.overall, 100.0);
        let weighted: f64 = report.per_task.values().map(|g| g.accuracy * g.n as f64).sum::<f64>()
            / report.n_tuples as f64;
        assert!((weighted - report.overall).abs() <= 1e-9);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let ts = tuples();
        let w = standard_world();
        let mut accs = Vec::new();
        for seed in 0..3 {
            let m = DualEncoder::new(DualEncoderConfig::new(w.vocabulary(), 100 + seed));
            let r = evaluate_accuracy(&m, &ts, "all").unwrap();
            let weighted: f64 =
                r.per_task.values().map(|g| g.accuracy * g.n as f64).sum::<f64>() / r.n_tuples as f64;
            assert!((weighted - r.overall).abs() <= 1e-9);
            accs.push(r.overall);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(ts.len() >= 200);
        assert!((40.0..=60.0).contains(&mean), "{accs:?}");
    }

    #[test]
    fn empty_split_is_an_error() {
        let m = DualEncoder::new(DualEncoderConfig::new(standard_world().vocabulary(), 0));
        assert!(matches!(evaluate_accuracy(&m, &[], "x"), Err(RewardError::Empty(_))));
    }
}
