use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::RasterImage;
use super::render::{Complexity, PixelBox};
use super::{Attribute, Domain, Orientation, SciTuple, Split, World, WorldError};
use crate::rng::{hash_str, mix, stream_rng};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Fractions of each task's (subject, condition) combinations assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test_simple: f64,
    pub test_complex: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            test_simple: 0.1,
            test_complex: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Task ids to include; empty means every task of the world.
    pub tasks: Vec<String>,
    /// Tuples rendered per (task, subject, condition) combination.
    pub variants_per_combo: u32,
    pub split: SplitFractions,
    /// Share of training tuples rendered with a cluttered background.
    pub train_complex_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            variants_per_combo: 8,
            split: SplitFractions::default(),
            train_complex_fraction: 0.25,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let f = self.split;
        for (name, v) in [
            ("train", f.train),
            ("test_simple", f.test_simple),
            ("test_complex", f.test_complex),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(WorldError::Config(format!("split fraction {name}={v} outside [0,1]")));
            }
        }
        if (f.train + f.test_simple + f.test_complex - 1.0).abs() > 1e-9 {
            return Err(WorldError::Config("split fractions must sum to 1".into()));
        }
        if self.variants_per_combo == 0 {
            return Err(WorldError::Config("variants_per_combo must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_complex_fraction) {
            return Err(WorldError::Config("train_complex_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

/// One manifest line: the tuple's fields with image paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
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
    pub explicit_image: String,
    pub superficial_image: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

fn slug(s: &str) -> String {
    s.replace(' ', "-")
}

fn combo_id(task: &str, subject: &str, condition: &str) -> String {
    format!("{}/{}/{}", slug(task), slug(subject), slug(condition))
}

/// Assigns each combination of one task to a split. Held-out combinations are
/// chosen so their subject and their condition each keep at least one training
/// combination, which makes the test splits compositional rather than unseen.
fn assign_splits(combos: &[(String, String)], fractions: SplitFractions, rng: &mut impl Rng) -> Vec<Split> {
    let n = combos.len();
    let want_simple = (fractions.test_simple * n as f64).round() as usize;
    let want_complex = (fractions.test_complex * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut splits = vec![Split::Train; n];
    let mut train_by_subject: BTreeMap<&str, usize> = BTreeMap::new();
    let mut train_by_condition: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, c) in combos {
        *train_by_subject.entry(s).or_default() += 1;
        *train_by_condition.entry(c).or_default() += 1;
    }
    // Interleaved so that a shortage of eligible combos hits both test splits evenly.
    let mut pending: Vec<Split> = Vec::new();
    let (mut a, mut b) = (want_simple, want_complex);
    while a > 0 || b > 0 {
        if a > 0 {
            pending.push(Split::TestSimple);
            a -= 1;
        }
        if b > 0 {
            pending.push(Split::TestComplex);
            b -= 1;
        }
    }
    let mut next = pending.into_iter();
    let mut current = next.next();
    for &i in &order {
        let Some(target) = current else { break };
        let (s, c) = (&combos[i].0, &combos[i].1);
        if train_by_subject[s.as_str()] > 1 && train_by_condition[c.as_str()] > 1 {
            splits[i] = target;
            *train_by_subject.get_mut(s.as_str()).unwrap() -= 1;
            *train_by_condition.get_mut(c.as_str()).unwrap() -= 1;
            current = next.next();
        }
    }
    splits
}

/// Realizes every tuple of the dataset in memory, in manifest order.
pub fn plan_dataset(world: &World, config: &DatasetConfig) -> Result<Vec<SciTuple>, WorldError> {
    config.validate()?;
    let tasks: Vec<_> = if config.tasks.is_empty() {
        world.tasks.iter().collect()
    } else {
        config
            .tasks
            .iter()
            .map(|t| world.task(t))
            .collect::<Result<_, _>>()?
    };
    let mut out = Vec::new();
    let mut seen: BTreeMap<String, Split> = BTreeMap::new();
    for task in tasks {
        task.validate()?;
        let combos: Vec<(String, String)> = task.combos().map(|(s, c)| (s.to_string(), c.to_string())).collect();
        let mut rng = stream_rng(mix(&[config.seed, hash_str(&task.task_id)]), 0);
        let splits = assign_splits(&combos, config.split, &mut rng);
        for ((subject, condition), split) in combos.iter().zip(splits) {
            let cid = combo_id(&task.task_id, subject, condition);
            if let Some(prev) = seen.insert(cid.clone(), split) {
                if prev != split {
                    return Err(WorldError::DuplicateTuple(cid));
                }
            }
            for variant in 0..config.variants_per_combo {
                let nuisance_seed = mix(&[
                    config.seed,
                    hash_str(&task.task_id),
                    hash_str(subject),
                    hash_str(condition),
                    variant as u64,
                ]);
                let complexity = match split {
                    Split::TestSimple => Complexity::Simple,
                    Split::TestComplex => Complexity::Complex,
                    Split::Train => {
                        let u = (mix(&[nuisance_seed, 0x5EED]) >> 11) as f64 / (1u64 << 53) as f64;
                        if u < config.train_complex_fraction {
                            Complexity::Complex
                        } else {
                            Complexity::Simple
                        }
                    }
                };
                let mut tuple = world.realize_tuple(task, subject, condition, complexity, nuisance_seed)?;
                tuple.id = format!("{cid}/{variant}");
                tuple.variant = variant;
                tuple.split = split;
                out.push(tuple);
            }
        }
    }
    check_disjoint(&out)?;
    Ok(out)
}

/// Fails if a (task, subject, condition) identity occurs in more than one split.
pub(crate) fn check_disjoint(tuples: &[SciTuple]) -> Result<(), WorldError> {
    let mut by_combo: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for t in tuples {
        if !ids.insert(t.id.as_str()) {
            return Err(WorldError::DuplicateTuple(t.id.clone()));
        }
        by_combo
            .entry(combo_id(&t.task_id, &t.subject, &t.condition))
            .or_default()
            .insert(t.split);
    }
    match by_combo.into_iter().find(|(_, s)| s.len() > 1) {
        Some((id, _)) => Err(WorldError::DuplicateTuple(id)),
        None => Ok(()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorldError + '_ {
    move |e| WorldError::Io(path.display().to_string(), e)
}

/// Builds the dataset under `out_dir`: `manifest.jsonl` plus PNG images in `images/<split>/`.
pub fn build_dataset(world: &World, config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, WorldError> {
    let tuples = plan_dataset(world, config)?;
    for split in [Split::Train, Split::TestSimple, Split::TestComplex] {
        let dir = out_dir.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut records = Vec::with_capacity(tuples.len());
    let mut lines = String::new();
    for (i, t) in tuples.iter().enumerate() {
        let rel = |which: &str| format!("images/{}/{i:05}_{which}.png", t.split.as_str());
        let (exp_rel, sup_rel) = (rel("explicit"), rel("superficial"));
        t.explicit_image.save_png(&out_dir.join(&exp_rel))?;
        t.superficial_image.save_png(&out_dir.join(&sup_rel))?;
        let rec = ManifestRecord {
            id: t.id.clone(),
            task_id: t.task_id.clone(),
            domain: t.domain,
            orientation: t.orientation,
            subject: t.subject.clone(),
            condition: t.condition.clone(),
            complexity: t.complexity,
            variant: t.variant,
            nuisance_seed: t.nuisance_seed,
            split: t.split,
            implicit_prompt: t.implicit_prompt.clone(),
            explicit_prompt: t.explicit_prompt.clone(),
            superficial_prompt: t.superficial_prompt.clone(),
            explicit_attribute: t.explicit_attribute,
            superficial_attribute: t.superficial_attribute,
            subject_box: t.subject_box,
            explicit_image: exp_rel,
            superficial_image: sup_rel,
        };
        lines.push_str(&serde_json::to_string(&rec).map_err(|e| WorldError::Manifest(e.to_string()))?);
        lines.push('\n');
        records.push(rec);
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    f.write_all(lines.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        manifest_path,
        records,
    })
}

/// Reads a manifest; `path` may be the JSONL file or the dataset directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, WorldError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| WorldError::Manifest(format!("{}:{}: {e}", manifest_path.display(), n + 1)))?;
        records.push(rec);
    }
    Ok(DatasetManifest {
        root,
        manifest_path,
        records,
    })
}

/// Loads tuples (with images) from a manifest, optionally restricted to one split.
pub fn load_tuples(path: &Path, split: Option<Split>) -> Result<Vec<SciTuple>, WorldError> {
    let manifest = load_manifest(path)?;
    manifest
        .records
        .into_iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .map(|r| {
            Ok(SciTuple {
                explicit_image: RasterImage::load_png(&manifest.root.join(&r.explicit_image))?,
                superficial_image: RasterImage::load_png(&manifest.root.join(&r.superficial_image))?,
                id: r.id,
                task_id: r.task_id,
                domain: r.domain,
                orientation: r.orientation,
                subject: r.subject,
                condition: r.condition,
                complexity: r.complexity,
                variant: r.variant,
                nuisance_seed: r.nuisance_seed,
                split: r.split,
                implicit_prompt: r.implicit_prompt,
                explicit_prompt: r.explicit_prompt,
                superficial_prompt: r.superficial_prompt,
                explicit_attribute: r.explicit_attribute,
                superficial_attribute: r.superficial_attribute,
                subject_box: r.subject_box,
            })
        })
        .collect()
}
