//! Per-token audit records.
//!
//! One record is written for every token each time its objective is
//! evaluated. It carries the rollout-time quantities (token, entropy,
//! advantage), the grouping outcome (label, detach flag, thresholds), the
//! objective outcome (ratio, value, weight, regime) and the score vector of
//! the live policy, so gradient analyses can be rebuilt from the dump alone.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupLabel;
use crate::objectives::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: usize,
    pub minibatch: usize,
    pub prompt_id: usize,
    pub response: usize,
    pub position: usize,
    pub token: usize,
    /// Policy table row the token was sampled from.
    pub row: usize,
    pub old_log_prob: f64,
    pub entropy: f64,
    pub reward: f64,
    pub advantage: f64,
    pub difficulty: f64,
    pub label: GroupLabel,
    pub detached: bool,
    /// Low detach threshold of the token's response; `null` when unset.
    pub tau_low: Option<f64>,
    /// High detach threshold of the token's response; `null` when unset.
    pub tau_high: Option<f64>,
    pub ratio: f64,
    pub value: f64,
    pub weight: f64,
    pub regime: Regime,
    /// Gradient of the token's log-probability w.r.t. its row, at the live
    /// policy the objective was evaluated under.
    pub score: Vec<f64>,
}

impl AuditRecord {
    pub fn is_high_entropy(&self) -> bool {
        self.label.is_high_entropy()
    }
}

/// Buffered JSON-lines writer for audit records.
pub struct AuditWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl AuditWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &AuditRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)
            .map_err(|e| Error::io(&self.path, e.into()))?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_audit(BufReader::new(file), path)
}

pub fn parse_audit<R: BufRead>(reader: R, path: &Path) -> Result<Vec<AuditRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> AuditRecord {
        AuditRecord {
            step: 3,
            minibatch: 1,
            prompt_id: 17,
            response: 2,
            position: 1,
            token: 5,
            row: 42,
            old_log_prob: -(16f64).ln(),
            entropy: (16f64).ln(),
            reward: 1.0,
            advantage: 0.75,
            difficulty: 0.625,
            label: GroupLabel::G2,
            detached: false,
            tau_low: None,
            tau_high: Some(2.5),
            ratio: 1.1,
            value: 0.825,
            weight: 1.1,
            regime: Regime::InRange,
            score: vec![0.1, -0.2, 0.1],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let mut w = AuditWriter::create(&path).unwrap();
        w.write(&record()).unwrap();
        w.write(&record()).unwrap();
        w.finish().unwrap();
        let back = read_audit(&path).unwrap();
        assert_eq!(back, vec![record(), record()]);
    }

    #[test]
    fn bad_line_is_located() {
        let text = format!("{}\n{{\"step\": 1}}\n", serde_json::to_string(&record()).unwrap());
        match parse_audit(text.as_bytes(), Path::new("d")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
