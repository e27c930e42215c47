//! Stage commands. Each artifact-producing command writes a config snapshot
//! and appends one ledger entry.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiments::{
    lambda_sweep, render_ablation_table, render_sweep_table, run_ablation, train_base, train_sft, AblationVariant,
};
use super::ledger::unix_now;
use super::{eval_prompts, io_at, oft_prompt_pool, LedgerEntry, OrchestratorError, RunConfig, RunDir, RunLedger};
use crate::bench::{
    relative_improvement, reward_benchmark, run_benchmark, BenchmarkReport, FlowGenerator, HttpJudge, Judge,
    OracleJudge, PromptKind, RewardBenchmark,
};
use crate::flow::{ode_sample, VelocityModel};
use crate::oft::{oft_train, HttpDetector, SaturationLocator, SubjectLocator};
use crate::reward::{evaluate_accuracy, train_sciscore, DualEncoder, DualEncoderConfig, EvalReport};
use crate::synthworld::{build_dataset, load_tuples, standard_world, SciTuple, Split};

#[derive(Debug, Parser)]
#[command(name = "scialign", version, about = "Scientific-preference reward, flow generator and masked online DPO")]
pub struct GlobalArgs {
    /// Key-value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    /// `desk` or `paper_faithful`.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Train the reward model on the training split.
    TrainReward,
    /// Two-choice accuracy of the reward model per split.
    EvalReward,
    /// Pretrain the base generator (if missing) and fine-tune it on implicit prompts.
    Sft,
    /// Online preference fine-tuning.
    Oft(OftArgs),
    /// Rubric-graded benchmark of one generator.
    Bench(BenchArgs),
    /// Relative improvement from three benchmark results.
    RiReport(RiArgs),
    /// Train and evaluate one reward model per λ.
    LambdaSweep,
    /// OFT ablation grid over seeds.
    AblateOft,
    /// Sample one image.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct OftArgs {
    /// Starting model: `sft` or `base`.
    #[arg(long, default_value = "sft")]
    pub init: String,
    /// Output name under `oft/`; defaults to `oft` (from sft) or `oft_only` (from base).
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `base`, `sft`, an OFT tag, or a checkpoint path.
    #[arg(long, default_value = "sft")]
    pub model: String,
    #[arg(long, value_enum, default_value = "implicit")]
    pub prompt_kind: KindArg,
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub images_per_prompt: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Implicit,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiMetric {
    /// Normalized judge score.
    Judge,
    /// Mean reward-model score.
    Reward,
}

#[derive(Debug, Args)]
pub struct RiArgs {
    #[arg(long, requires_all = ["base_ep", "fine_ip"])]
    pub base_ip: Option<PathBuf>,
    #[arg(long)]
    pub base_ep: Option<PathBuf>,
    #[arg(long)]
    pub fine_ip: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "judge")]
    pub metric: RiMetric,
    /// Raw `base_ip base_ep fine_ip` scores instead of report files.
    #[arg(long, num_args = 3, conflicts_with = "base_ip")]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "sft")]
    pub model: String,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output PNG, relative to the run directory.
    #[arg(long, default_value = "samples/sample.png")]
    pub out: String,
}

/// Benchmark output file: judge report plus, when a reward model exists, the mean reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub report: BenchmarkReport,
    pub reward: Option<RewardBenchmark>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiReport {
    pub metric: RiMetric,
    pub base_ip: f64,
    pub base_ep: f64,
    pub fine_ip: f64,
    pub ri: f64,
    pub ri_percent: f64,
}

const DATA_MANIFEST: &str = "data/manifest.jsonl";
const REWARD_CKPT: &str = "reward/model.ckpt";
const BASE_CKPT: &str = "flow/base.ckpt";
const SFT_CKPT: &str = "flow/sft.ckpt";

fn parse_split(s: &str) -> Result<Split, OrchestratorError> {
    match s {
        "train" => Ok(Split::Train),
        "test_simple" => Ok(Split::TestSimple),
        "test_complex" => Ok(Split::TestComplex),
        other => Err(OrchestratorError::Usage(format!(
            "unknown split {other:?} (train, test_simple, test_complex)"
        ))),
    }
}

fn overrides(args: &GlobalArgs) -> Result<Vec<(String, String)>, OrchestratorError> {
    let mut out = Vec::new();
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| OrchestratorError::Usage(format!("--set expects key=value, got {o:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = args.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &args.out_dir {
        out.push(("out_dir".into(), serde_json::to_string(d)?));
    }
    if let Some(p) = &args.profile {
        out.push(("profile".into(), p.clone()));
    }
    if let Command::Bench(b) = &args.command {
        if let Some(j) = &b.judge {
            out.push(("bench.judge".into(), j.clone()));
        }
        if let Some(n) = b.images_per_prompt {
            out.push(("bench.images_per_prompt".into(), n.to_string()));
        }
        if let Some(s) = &b.split {
            out.push(("bench.split".into(), s.clone()));
        }
    }
    Ok(out)
}

/// Runs one stage: snapshot, body, ledger entry (skipped when the body reports no artifacts).
fn stage(
    dir: &RunDir,
    cfg: &RunConfig,
    command: &str,
    body: impl FnOnce() -> Result<Vec<String>, OrchestratorError>,
) -> Result<(), OrchestratorError> {
    let started = unix_now();
    let snapshot = dir.write_snapshot(cfg)?;
    let artifacts = body()?;
    if artifacts.is_empty() {
        return Ok(());
    }
    RunLedger::open(dir).append(&LedgerEntry {
        run_id: dir.run_id(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        snapshot,
        artifacts,
        started_unix: started,
        finished_unix: unix_now(),
    })
}

/// SHA-256 over every file under `root` (relative path and bytes, sorted by path).
fn tree_digest(root: &Path) -> Result<String, OrchestratorError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files).map_err(io_at(root))?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(io_at(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn gen_data(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let target = dir.data_dir();
    let staging = dir.path(&format!("data.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
    }
    let manifest = build_dataset(&standard_world(), &cfg.dataset_config(), &staging)?;
    if target.exists() {
        if tree_digest(&target)? == tree_digest(&staging)? {
            fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
            println!("gen-data: {} already holds identical output; nothing to do", target.display());
            return Ok(Vec::new());
        }
        if !force {
            fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
            return Err(OrchestratorError::AlreadyExists(target));
        }
        fs::remove_dir_all(&target).map_err(io_at(&target))?;
    }
    fs::rename(&staging, &target).map_err(io_at(&target))?;
    println!(
        "gen-data: {} tuples (train {}, test_simple {}, test_complex {})",
        manifest.records.len(),
        manifest.count(Split::Train),
        manifest.count(Split::TestSimple),
        manifest.count(Split::TestComplex)
    );
    Ok(vec![DATA_MANIFEST.into()])
}

fn tuples(dir: &RunDir, split: Option<Split>) -> Result<Vec<SciTuple>, OrchestratorError> {
    Ok(load_tuples(&dir.require(DATA_MANIFEST, "gen-data")?, split)?)
}

fn train_reward(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let train = tuples(dir, Some(Split::Train))?;
    let ckpt = dir.claim(REWARD_CKPT, force)?;
    let metrics = dir.path("reward/metrics.jsonl");
    let enc = DualEncoderConfig::new(standard_world().vocabulary(), cfg.stage_seed("reward-init"));
    let out = train_sciscore(&train, enc, &cfg.reward_hyper(cfg.stage_seed("reward")), Some(&metrics))?;
    out.model.save(&ckpt)?;
    if let Some(last) = out.history.last() {
        println!("train-reward: {} steps, final loss {:.4}", out.history.len(), last.loss);
    }
    Ok(vec![REWARD_CKPT.into(), "reward/metrics.jsonl".into()])
}

fn eval_reward(dir: &RunDir, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let model = DualEncoder::load(&dir.require(REWARD_CKPT, "train-reward")?)?;
    let all = tuples(dir, None)?;
    dir.claim("reward/eval.json", force)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for split in [Split::Train, Split::TestSimple, Split::TestComplex] {
        let ts: Vec<SciTuple> = all.iter().filter(|t| t.split == split).cloned().collect();
        if ts.is_empty() {
            continue;
        }
        let r = evaluate_accuracy(&model, &ts, split.as_str())?;
        println!("eval-reward: {:<12} {:6.2}% over {} tuples", split.as_str(), r.overall, r.n_tuples);
        reports.push(r);
    }
    dir.write_json("reward/eval.json", &reports)?;
    Ok(vec!["reward/eval.json".into()])
}

fn sft(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let train = tuples(dir, Some(Split::Train))?;
    let mut artifacts = Vec::new();
    let base_path = dir.path(BASE_CKPT);
    let base = if base_path.exists() && !force {
        log::info!("reusing base model {}", base_path.display());
        VelocityModel::load(&base_path)?
    } else {
        let p = dir.claim(BASE_CKPT, true)?;
        let m = train_base(cfg, &train, Some(&dir.path("flow/base_metrics.jsonl")))?;
        m.save(&p)?;
        artifacts.extend([BASE_CKPT.to_string(), "flow/base_metrics.jsonl".to_string()]);
        m
    };
    let ckpt = dir.claim(SFT_CKPT, force)?;
    let model = train_sft(cfg, &base, &train, cfg.stage_seed("sft"), Some(&dir.path("flow/sft_metrics.jsonl")))?;
    model.save(&ckpt)?;
    println!("sft: saved {}", ckpt.display());
    artifacts.extend([SFT_CKPT.to_string(), "flow/sft_metrics.jsonl".to_string()]);
    Ok(artifacts)
}

fn locator(cfg: &RunConfig) -> Result<Box<dyn SubjectLocator>, OrchestratorError> {
    match cfg.oft.locator.as_str() {
        "http" => HttpDetector::from_env()
            .map(|d| Box::new(d) as Box<dyn SubjectLocator>)
            .ok_or_else(|| OrchestratorError::Usage("oft.locator = http needs SCIALIGN_DETECTOR_URL".into())),
        _ => Ok(Box::new(SaturationLocator)),
    }
}

fn oft(dir: &RunDir, cfg: &RunConfig, args: &OftArgs, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let (init_rel, default_tag) = match args.init.as_str() {
        "sft" => (SFT_CKPT, "oft"),
        "base" => (BASE_CKPT, "oft_only"),
        other => return Err(OrchestratorError::Usage(format!("--init must be sft or base, got {other:?}"))),
    };
    let tag = args.tag.clone().unwrap_or_else(|| default_tag.to_string());
    let init = VelocityModel::load(&dir.require(init_rel, "sft")?)?;
    let reward = DualEncoder::load(&dir.require(REWARD_CKPT, "train-reward")?)?;
    let train = tuples(dir, Some(Split::Train))?;
    let (ckpt_rel, metrics_rel, curve_rel) =
        (format!("oft/{tag}.ckpt"), format!("oft/{tag}_metrics.jsonl"), format!("oft/{tag}_curve.json"));
    let ckpt = dir.claim(&ckpt_rel, force)?;
    let loc = locator(cfg)?;
    let out = oft_train(
        init.clone(),
        &init,
        &reward,
        &oft_prompt_pool(&train),
        &eval_prompts(&train),
        loc.as_ref(),
        &cfg.oft_config(cfg.stage_seed("oft")),
        Some(&dir.path(&metrics_rel)),
    )?;
    out.model.save(&ckpt)?;
    dir.write_json(&curve_rel, &out.eval_curve)?;
    let curve: Vec<String> = out.eval_curve.iter().map(|p| format!("{}:{:.4}", p.step, p.mean_reward)).collect();
    println!("oft {tag}: eval reward {}", curve.join(" "));
    Ok(vec![ckpt_rel, metrics_rel, curve_rel])
}

fn resolve_model(dir: &RunDir, name: &str) -> Result<PathBuf, OrchestratorError> {
    match name {
        "base" => dir.require(BASE_CKPT, "sft"),
        "sft" => dir.require(SFT_CKPT, "sft"),
        _ => {
            let tagged = dir.path(&format!("oft/{name}.ckpt"));
            if tagged.exists() {
                Ok(tagged)
            } else if Path::new(name).exists() {
                Ok(PathBuf::from(name))
            } else {
                Err(OrchestratorError::MissingArtifact {
                    path: tagged,
                    stage: "oft",
                })
            }
        }
    }
}

fn model_label(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn bench(dir: &RunDir, cfg: &RunConfig, args: &BenchArgs, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let model = VelocityModel::load(&resolve_model(dir, &args.model)?)?;
    let split = parse_split(&cfg.bench.split)?;
    let ts = tuples(dir, Some(split))?;
    let kind = match args.prompt_kind {
        KindArg::Implicit => PromptKind::Implicit,
        KindArg::Explicit => PromptKind::Explicit,
    };
    let label = model_label(&args.model);
    let rel = format!(
        "bench/{label}_{}_{}.json",
        match kind {
            PromptKind::Implicit => "ip",
            PromptKind::Explicit => "ep",
        },
        cfg.bench.split
    );
    dir.claim(&rel, force)?;
    let judge: Box<dyn Judge> = match cfg.bench.judge.as_str() {
        "http" => Box::new(
            HttpJudge::from_env()
                .ok_or_else(|| OrchestratorError::Usage("bench.judge = http needs SCIALIGN_JUDGE_URL".into()))?,
        ),
        _ => Box::new(OracleJudge::new(&ts)),
    };
    let generator = FlowGenerator {
        model: &model,
        n_steps: cfg.generator.sample_steps,
        name: label,
    };
    let seed = cfg.stage_seed("bench");
    let n = cfg.bench.images_per_prompt;
    let report = run_benchmark(&generator, &ts, &cfg.bench.split, kind, n, judge.as_ref(), seed)?;
    let reward = match dir.require(REWARD_CKPT, "train-reward") {
        Ok(p) => Some(reward_benchmark(&generator, &ts, kind, n, &DualEncoder::load(&p)?, seed)?),
        Err(_) => None,
    };
    println!(
        "bench {}: normalized score {:.2} over {} images{}",
        report.model_id,
        report.overall,
        report.n_images,
        reward.as_ref().map(|r| format!(", mean reward {:.4}", r.mean)).unwrap_or_default()
    );
    dir.write_json(&rel, &BenchOutput { report, reward })?;
    Ok(vec![rel])
}

fn bench_metric(path: &Path, metric: RiMetric) -> Result<f64, OrchestratorError> {
    let out: BenchOutput = RunDir::read_json(path)?;
    match metric {
        RiMetric::Judge => Ok(out.report.overall),
        RiMetric::Reward => out
            .reward
            .map(|r| r.mean)
            .ok_or_else(|| OrchestratorError::Usage(format!("{} has no reward score", path.display()))),
    }
}

/// Relative improvement from raw scores or benchmark outputs.
pub fn ri_report(args: &RiArgs) -> Result<RiReport, OrchestratorError> {
    let (base_ip, base_ep, fine_ip) = match (&args.values, &args.base_ip, &args.base_ep, &args.fine_ip) {
        (Some(v), _, _, _) => (v[0], v[1], v[2]),
        (None, Some(a), Some(b), Some(c)) => (
            bench_metric(a, args.metric)?,
            bench_metric(b, args.metric)?,
            bench_metric(c, args.metric)?,
        ),
        _ => {
            return Err(OrchestratorError::Usage(
                "ri-report needs --values A B C or --base-ip, --base-ep and --fine-ip".into(),
            ))
        }
    };
    let ri = relative_improvement(base_ip, base_ep, fine_ip)?;
    Ok(RiReport {
        metric: args.metric,
        base_ip,
        base_ep,
        fine_ip,
        ri,
        ri_percent: 100.0 * ri,
    })
}

fn ri(dir: &RunDir, args: &RiArgs, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let r = ri_report(args)?;
    let rel = "reports/ri.json";
    dir.claim(rel, force)?;
    dir.write_json(rel, &r)?;
    println!("ri-report: RI = {:.2}%", r.ri_percent);
    Ok(vec![rel.into()])
}

fn sweep(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let all = tuples(dir, None)?;
    let (json, md) = ("reports/lambda_sweep.json", "reports/lambda_sweep.md");
    dir.claim(json, force)?;
    let rows = lambda_sweep(cfg, &all)?;
    let table = render_sweep_table(&rows);
    dir.write_json(json, &rows)?;
    fs::write(dir.path(md), &table).map_err(io_at(dir.path(md)))?;
    print!("{table}");
    Ok(vec![json.into(), md.into()])
}

fn ablate(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let train = tuples(dir, Some(Split::Train))?;
    let reward = DualEncoder::load(&dir.require(REWARD_CKPT, "train-reward")?)?;
    let base = VelocityModel::load(&dir.require(BASE_CKPT, "sft")?)?;
    let (json, md) = ("reports/ablation.json", "reports/ablation.md");
    dir.claim(json, force)?;
    let loc = locator(cfg)?;
    let report = run_ablation(cfg, &train, &reward, &base, loc.as_ref(), &AblationVariant::ALL)?;
    let table = render_ablation_table(&report);
    dir.write_json(json, &report)?;
    fs::write(dir.path(md), &table).map_err(io_at(dir.path(md)))?;
    print!("{table}");
    Ok(vec![json.into(), md.into()])
}

fn sample(dir: &RunDir, cfg: &RunConfig, args: &SampleArgs, force: bool) -> Result<Vec<String>, OrchestratorError> {
    let model = VelocityModel::load(&resolve_model(dir, &args.model)?)?;
    let out = dir.claim(&args.out, force)?;
    let img = ode_sample(
        &model,
        &args.prompt,
        args.steps.unwrap_or(cfg.generator.sample_steps),
        cfg.stage_seed("sample"),
    )?;
    img.save_png(&out)?;
    println!("sample: wrote {}", out.display());
    Ok(vec![args.out.clone()])
}

/// Executes a parsed command line.
pub fn dispatch(args: GlobalArgs) -> Result<(), OrchestratorError> {
    let cfg = RunConfig::load(args.config.as_deref(), &overrides(&args)?)?;
    let dir = RunDir::create(&cfg.out_dir)?;
    let force = args.force;
    match &args.command {
        Command::GenData => stage(&dir, &cfg, "gen-data", || gen_data(&dir, &cfg, force)),
        Command::TrainReward => stage(&dir, &cfg, "train-reward", || train_reward(&dir, &cfg, force)),
        Command::EvalReward => stage(&dir, &cfg, "eval-reward", || eval_reward(&dir, force)),
        Command::Sft => stage(&dir, &cfg, "sft", || sft(&dir, &cfg, force)),
        Command::Oft(a) => stage(&dir, &cfg, "oft", || oft(&dir, &cfg, a, force)),
        Command::Bench(a) => stage(&dir, &cfg, "bench", || bench(&dir, &cfg, a, force)),
        Command::RiReport(a) => stage(&dir, &cfg, "ri-report", || ri(&dir, a, force)),
        Command::LambdaSweep => stage(&dir, &cfg, "lambda-sweep", || sweep(&dir, &cfg, force)),
        Command::AblateOft => stage(&dir, &cfg, "ablate-oft", || ablate(&dir, &cfg, force)),
        Command::Sample(a) => stage(&dir, &cfg, "sample", || sample(&dir, &cfg, a, force)),
    }
}
