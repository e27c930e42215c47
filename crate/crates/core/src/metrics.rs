//! Append-only JSONL metrics sink.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    /// A writer that discards everything.
    pub fn null() -> Self {
        Self { out: None }
    }

    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).truncate(true).write(true).open(path)?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn optional(path: Option<&Path>) -> std::io::Result<Self> {
        match path {
            Some(p) => Self::create(p),
            None => Ok(Self::null()),
        }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match &mut self.out {
            Some(out) => out.flush(),
            None => Ok(()),
        }
    }
}
