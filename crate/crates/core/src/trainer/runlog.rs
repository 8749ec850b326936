use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StepStats;
use crate::error::{Error, Result};
use crate::evalstats::{iqm, median, ScoreMatrix, TaskEntry};

/// Mean losses over the steps since the previous record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub td: f64,
    pub cql: f64,
    pub total: f64,
    #[serde(default)]
    pub bc: Option<f64>,
    pub steps: u64,
}

impl LossTrace {
    pub(crate) fn add(&mut self, s: &StepStats) {
        self.td += s.loss.td;
        self.cql += s.loss.cql;
        self.total += s.loss.total;
        if let Some(b) = s.bc {
            *self.bc.get_or_insert(0.0) += b;
        }
        self.steps += 1;
    }

    pub(crate) fn mean(&self) -> LossTrace {
        let n = self.steps.max(1) as f64;
        LossTrace {
            td: self.td / n,
            cql: self.cql / n,
            total: self.total / n,
            bc: self.bc.map(|b| b / n),
            steps: self.steps,
        }
    }
}

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub wall_clock_s: f64,
    pub losses: LossTrace,
    pub per_task: Vec<TaskEntry>,
    /// Aggregates over `per_task`; absent when nothing was evaluated.
    pub iqm: Option<f64>,
    pub median: Option<f64>,
}

impl EvalRecord {
    pub fn from_matrix(step: u64, wall_clock_s: f64, losses: LossTrace, matrix: &ScoreMatrix) -> Result<Self> {
        let norm = matrix.normalized()?;
        let per_task = matrix
            .tasks
            .iter()
            .zip(&norm)
            .map(|(t, &n)| TaskEntry {
                name: t.name.clone(),
                raw_mean: t.raw_mean(),
                normalized: n,
            })
            .collect();
        Ok(EvalRecord {
            step,
            wall_clock_s,
            losses,
            per_task,
            iqm: Some(iqm(&norm)?),
            median: Some(median(&norm)?),
        })
    }

    pub fn losses_only(step: u64, wall_clock_s: f64, losses: LossTrace) -> Self {
        EvalRecord {
            step,
            wall_clock_s,
            losses,
            per_task: Vec::new(),
            iqm: None,
            median: None,
        }
    }
}

/// Append-only evaluation history, optionally mirrored to a JSON-lines
/// file as records arrive.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
    sink: Option<(PathBuf, File)>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `path`, keeping whatever it already holds.
    pub fn with_file(path: &Path) -> Result<Self> {
        let records = if path.exists() { Self::read(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            records,
            sink: Some((path.to_path_buf(), file)),
        })
    }

    /// Step indices must increase.
    pub fn push(&mut self, r: EvalRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::InvalidState(format!(
                    "log record at step {} after step {}",
                    r.step, last.step
                )));
            }
        }
        if let Some((path, f)) = &mut self.sink {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn read(path: &Path) -> Result<Vec<EvalRecord>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                offset: 0,
                msg: format!("{} line {}: {e}", path.display(), i + 1),
            })?);
        }
        Ok(out)
    }
}
