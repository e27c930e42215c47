//! Run directories and the append-only JSONL ledger.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{io_at, OrchestratorError, RunConfig};

pub const LEDGER_FILE: &str = "ledger.jsonl";

/// One completed command. Artifact paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub snapshot: String,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        Ok(Self { root })
    }

    pub fn run_id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    /// Fails with a pointer to the producing stage when `rel` is missing.
    pub fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf, OrchestratorError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(OrchestratorError::MissingArtifact { path: p, stage })
        }
    }

    /// Refuses to overwrite an existing output unless `force` is set.
    pub fn claim(&self, rel: &str, force: bool) -> Result<PathBuf, OrchestratorError> {
        let p = self.path(rel);
        if p.exists() && !force {
            return Err(OrchestratorError::AlreadyExists(p));
        }
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        Ok(p)
    }

    /// Writes the resolved config under `snapshots/<hash>.cfg` and returns the relative path.
    pub fn write_snapshot(&self, cfg: &RunConfig) -> Result<String, OrchestratorError> {
        let rel = format!("snapshots/{}.cfg", cfg.hash());
        let p = self.path(&rel);
        if !p.exists() {
            fs::create_dir_all(self.path("snapshots")).map_err(io_at(self.path("snapshots")))?;
            fs::write(&p, cfg.snapshot()).map_err(io_at(&p))?;
        }
        Ok(rel)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), OrchestratorError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        fs::write(&p, serde_json::to_string_pretty(value)?).map_err(io_at(&p))
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct RunLedger {
    path: PathBuf,
}

impl RunLedger {
    pub fn open(dir: &RunDir) -> Self {
        Self {
            path: dir.path(LEDGER_FILE),
        }
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<(), OrchestratorError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_at(&self.path))?;
        writeln!(f, "{}", serde_json::to_string(entry)?).map_err(io_at(&self.path))
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, OrchestratorError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&self.path).map_err(io_at(&self.path))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_at(&self.path))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
