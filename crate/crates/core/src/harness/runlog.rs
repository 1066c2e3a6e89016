//! Per-step losses as JSON Lines: one header line, then one record per
//! generator/discriminator step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogHeader {
    pub stage: u8,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    /// Weighted captioner term; 0 while the warmup gate is closed.
    pub cap_loss: f64,
    pub kl: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        [self.g_loss, self.d_loss, self.cap_loss, self.kl, self.d_real, self.d_fake]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl RunLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path, header: &RunLogHeader) -> Result<Self> {
        Self::rewrite(path, header, &[])
    }

    /// Rewrites the log with `records`, used when resuming to drop steps
    /// past the checkpoint.
    pub fn rewrite(path: &Path, header: &RunLogHeader, records: &[StepRecord]) -> Result<Self> {
        let mut text = serde_json::to_string(header)?;
        text.push('\n');
        for r in records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step: records.last().map(|r| r.step),
        })
    }

    pub fn append(&mut self, record: &StepRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::Invalid(format!(
                "run log steps must increase: {} after {:?}",
                record.step, self.last_step
            )));
        }
        if !record.is_finite() {
            return Err(Error::NonFinite {
                step: record.step,
                what: "run log record".into(),
            });
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(record.step);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(RunLogHeader, Vec<StepRecord>)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty run log"))?
            .map_err(|e| Error::io(path, e))?;
        let header = serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            records.push(rec);
        }
        Ok((header, records))
    }
}
