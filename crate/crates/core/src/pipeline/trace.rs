use crate::error::{Error, Result};
use crate::flow::LossBreakdown;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// One line of a run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    /// The fully resolved configuration of the run.
    Config { config: serde_json::Value },
    Clip { index: usize, retrieval_ids: Vec<u64>, retained_ratios: Vec<f64> },
    Step { index: usize, retrieval_ids: Vec<u64>, losses: LossBreakdown, retained_ratios: Vec<f64> },
}

/// Writes records as JSON lines.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, r: &TraceRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::State(format!("trace encoding failed: {e}")))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn record_all(&mut self, records: &[TraceRecord]) -> Result<()> {
        records.iter().try_for_each(|r| self.record(r))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}
