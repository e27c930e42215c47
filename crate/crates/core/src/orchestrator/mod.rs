//! Experiment wiring: configuration, run directories, the run ledger and
//! the stage commands behind the `scialign` binary.

mod commands;
mod config;
mod experiments;
mod ledger;

use std::path::PathBuf;

use thiserror::Error;

pub use commands::{
    dispatch, ri_report, BenchArgs, BenchOutput, Command, GlobalArgs, KindArg, OftArgs, RiArgs, RiMetric, RiReport,
    SampleArgs,
};
pub use config::{
    parse_entries, AblationSection, BenchSection, FlowSection, GeneratorSection, OftSection, Profile, RewardSection,
    RunConfig, SweepSection, WorldSection,
};
pub use experiments::{
    eval_prompts, lambda_sweep, median, oft_prompt_pool, pretrain_examples, render_ablation_table, render_sweep_table,
    run_ablation, sft_examples, train_base, train_sft, AblationReport, AblationRow, AblationVariant, OrderingVerdict,
    SweepRow,
};
pub use ledger::{LedgerEntry, RunDir, RunLedger};

use crate::bench::BenchError;
use crate::flow::FlowError;
use crate::oft::OftError;
use crate::reward::RewardError;
use crate::synthworld::WorldError;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{0} already exists; pass --force or use a new out_dir")]
    AlreadyExists(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Oft(#[from] OftError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> OrchestratorError {
    let path = path.into();
    move |source| OrchestratorError::Io { path, source }
}
