use std::fs;

use clap::Parser;
use scialign::orchestrator::{
    dispatch, parse_entries, GlobalArgs, LedgerEntry, OrchestratorError, Profile, RiReport, RunConfig, RunDir,
    RunLedger,
};

fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn run(dir: &std::path::Path, args: &[&str]) -> Result<(), OrchestratorError> {
    let mut argv = vec!["scialign", "--out-dir", dir.to_str().unwrap()];
    argv.extend_from_slice(args);
    dispatch(GlobalArgs::try_parse_from(argv).unwrap())
}

#[test]
fn empty_config_resolves_to_desk_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.cfg");
    fs::write(&path, "# nothing here\n\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg.profile, Profile::Desk);
    assert_eq!(cfg, RunConfig::defaults(Profile::Desk));
    // Setting a key to its default value changes nothing, including the hash.
    let same = RunConfig::load(None, &ov(&[("oft.beta", "10")])).unwrap();
    assert_eq!(same.hash(), cfg.hash());
}

#[test]
fn file_then_command_line_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.cfg");
    fs::write(&path, "profile = paper_faithful\noft.lr = 1e-4\nseed = 9\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &ov(&[("oft.lr", "2e-4")])).unwrap();
    assert_eq!(cfg.profile, Profile::PaperFaithful);
    assert_eq!(cfg.oft.lr, 2e-4);
    assert_eq!(cfg.seed, 9);
    assert!(!cfg.oft.shared_init);
    // The command-line profile wins over the file's.
    let cfg = RunConfig::load(Some(&path), &ov(&[("profile", "desk")])).unwrap();
    assert_eq!(cfg.profile, Profile::Desk);
    assert_eq!(cfg.oft.lr, 1e-4);
}

#[test]
fn bad_keys_and_duplicates_are_rejected() {
    assert!(matches!(
        RunConfig::load(None, &ov(&[("oft.betta", "1")])),
        Err(OrchestratorError::UnknownKey(k)) if k == "oft.betta"
    ));
    assert!(matches!(
        RunConfig::load(None, &ov(&[("oft.beta", "1"), ("oft.beta", "2")])),
        Err(OrchestratorError::Config(_))
    ));
    let err = parse_entries("seed = 1\noft.lr = 1e-4\nseed = 2\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(RunConfig::load(None, &ov(&[("oft.beta", "\"high\"")])).is_err());
    assert!(RunConfig::load(None, &ov(&[("oft.beta", "-1")])).is_err());
}

#[test]
fn infinite_churn_window_round_trips() {
    let cfg = RunConfig::load(None, &ov(&[("oft.s_max", "inf")])).unwrap();
    assert_eq!(cfg.churn().unwrap().s_max, f64::INFINITY);
    let cfg = RunConfig::load(None, &ov(&[("oft.s_max", "0.5")])).unwrap();
    assert_eq!(cfg.churn().unwrap().s_max, 0.5);
}

#[test]
fn ledger_appends_and_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::create(tmp.path().join("r1")).unwrap();
    let ledger = RunLedger::open(&dir);
    assert!(ledger.entries().unwrap().is_empty());
    let e = LedgerEntry {
        run_id: dir.run_id(),
        command: "gen-data".into(),
        config_hash: "ab".into(),
        snapshot: "snapshots/ab.cfg".into(),
        artifacts: vec!["data/manifest.jsonl".into()],
        started_unix: 1,
        finished_unix: 2,
    };
    ledger.append(&e).unwrap();
    ledger.append(&LedgerEntry { command: "sft".into(), ..e.clone() }).unwrap();
    let got = ledger.entries().unwrap();
    assert_eq!(got.len(), 2);
    assert_eq!(got[0], e);
    assert_eq!(got[1].command, "sft");
    assert_eq!(dir.run_id(), "r1");
}

#[test]
fn gen_data_is_idempotent_and_stages_need_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let small = ["--set", "world.variants_per_combo=1"];

    let err = run(&root, &[&small[..], &["train-reward"]].concat()).unwrap_err();
    assert!(matches!(err, OrchestratorError::MissingArtifact { stage: "gen-data", .. }), "{err}");

    run(&root, &[&small[..], &["gen-data"]].concat()).unwrap();
    let ledger = RunLedger::open(&RunDir::create(&root).unwrap());
    assert_eq!(ledger.entries().unwrap().len(), 1);
    // Same config: identical output, no new ledger entry.
    run(&root, &[&small[..], &["gen-data"]].concat()).unwrap();
    assert_eq!(ledger.entries().unwrap().len(), 1);
    // Different config over existing data needs --force.
    let err = run(&root, &["--seed", "5", "gen-data"]).unwrap_err();
    assert!(matches!(err, OrchestratorError::AlreadyExists(_)), "{err}");

    let entry = &ledger.entries().unwrap()[0];
    assert_eq!(entry.command, "gen-data");
    assert!(root.join(&entry.snapshot).exists());
    assert!(root.join("data/manifest.jsonl").exists());
}

#[test]
fn ri_report_from_values() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    run(&root, &["ri-report", "--values", "23.56", "32.85", "28.52"]).unwrap();
    let r: RiReport = serde_json::from_str(&fs::read_to_string(root.join("reports/ri.json")).unwrap()).unwrap();
    assert!((r.ri_percent - 53.39).abs() < 0.01);
    let err = run(&root, &["ri-report", "--values", "1", "2", "3"]).unwrap_err();
    assert!(matches!(err, OrchestratorError::AlreadyExists(_)));
    assert!(run(&root, &["ri-report", "--values", "5", "5", "7", "--force"]).is_err());
}
