//! Append-only JSON-lines run log. Line 1 stamps the schema version; each
//! following line is one logging step's record.

use crate::error::{GrokError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const RUNLOG_SCHEMA: u32 = 1;

/// One logging step's named scalar measurements. Keys serialize in sorted
/// order, so identical runs produce byte-identical lines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn new(step: u64) -> Self {
        MetricRecord {
            step,
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(GrokError::InvalidArgument(format!(
                "metric {name} at step {} is not finite",
                self.step
            )));
        }
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
}

pub struct RunLogWriter {
    out: BufWriter<File>,
}

impl RunLogWriter {
    /// Create a fresh log with its schema header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let mut w = RunLogWriter {
            out: BufWriter::new(file),
        };
        let header = serde_json::to_string(&Header {
            schema: RUNLOG_SCHEMA,
        })
        .expect("header serializes");
        writeln!(w.out, "{header}")?;
        w.out.flush()?;
        Ok(w)
    }

    /// Open an existing log for appending (resume).
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(RunLogWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        for (name, v) in &record.values {
            if !v.is_finite() {
                return Err(GrokError::InvalidArgument(format!(
                    "metric {name} at step {} is not finite",
                    record.step
                )));
            }
        }
        let line = serde_json::to_string(record)
            .map_err(|e| GrokError::InvalidArgument(format!("record serialization: {e}")))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a whole log; malformed lines are reported with their line number.
pub fn read_runlog(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let header: Header = serde_json::from_str(&line).map_err(|e| GrokError::LogParse {
                line: 1,
                reason: format!("bad header: {e}"),
            })?;
            if header.schema != RUNLOG_SCHEMA {
                return Err(GrokError::LogParse {
                    line: 1,
                    reason: format!("unsupported schema {}", header.schema),
                });
            }
            continue;
        }
        let record: MetricRecord = serde_json::from_str(&line).map_err(|e| GrokError::LogParse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
