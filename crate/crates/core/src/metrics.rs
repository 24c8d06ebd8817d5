//! Per-step training metrics and their JSON-lines persistence.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::grouping::GroupLabel;
use crate::objectives::Regime;

/// Bumped whenever a key is renamed or removed.
pub const SCHEMA_VERSION: u32 = 1;

/// Every key a metrics record may carry, with its meaning.
///
/// Group-entropy keys are `null` when the group has no tokens that step.
pub const METRICS_SCHEMA: &[(&str, &str)] = &[
    ("schema_version", "metrics schema version"),
    ("step", "global step index, 0-based"),
    ("iteration", "outer iteration index, 0-based"),
    ("policy_version", "policy version after the step's updates"),
    ("reward_mean", "mean reward over the training batch"),
    ("reward_generated_mean", "mean reward over every rollout generated this step"),
    ("correct_rate", "fraction of training-batch responses that verify"),
    ("response_length_mean", "mean response length over the training batch"),
    ("entropy_mean", "token-mean rollout entropy over every generated rollout"),
    ("entropy_batch_mean", "token-mean rollout entropy over the training batch"),
    ("groups_generated", "prompt groups generated this step"),
    ("groups_kept", "prompt groups trained on"),
    ("gen_rounds", "generation rounds needed to fill the batch"),
    ("hard_fraction", "fraction of training prompts classified hard"),
    ("tokens", "tokens in the training batch"),
    ("count_g1", "tokens labeled G1"),
    ("count_g2", "tokens labeled G2"),
    ("count_g3", "tokens labeled G3"),
    ("count_g4", "tokens labeled G4"),
    ("count_g5", "tokens labeled G5"),
    ("count_g6", "tokens labeled G6"),
    ("count_g7", "tokens labeled G7"),
    ("count_g8", "tokens labeled G8"),
    ("detached_g1", "G1 tokens below the low detach threshold"),
    ("detached_g6", "G6 tokens at or above the high detach threshold"),
    ("detached_fraction", "detached tokens over training-batch tokens"),
    ("entropy_g1", "mean rollout entropy of G1 tokens"),
    ("entropy_g2", "mean rollout entropy of G2 tokens"),
    ("entropy_g3", "mean rollout entropy of G3 tokens"),
    ("entropy_g4", "mean rollout entropy of G4 tokens"),
    ("entropy_g5", "mean rollout entropy of G5 tokens"),
    ("entropy_g6", "mean rollout entropy of G6 tokens"),
    ("entropy_g7", "mean rollout entropy of G7 tokens"),
    ("entropy_g8", "mean rollout entropy of G8 tokens"),
    ("high_low_entropy_gap", "mean entropy of high-split tokens minus low-split tokens"),
    ("clip_dead_fraction", "objective evaluations in the clipped-dead regime"),
    ("regime_in_range", "objective evaluations in the in-range regime"),
    ("regime_fixed_high", "objective evaluations in the fixed-high regime"),
    ("regime_reciprocal_low", "objective evaluations in the reciprocal-low regime"),
    ("regime_fixed_low", "objective evaluations in the fixed-low regime"),
    ("regime_detached", "objective evaluations in the detached regime"),
    ("ratio_max_deviation", "largest |r - 1| seen in any mini-batch"),
    ("surrogate", "mean over mini-batches of the token-mean surrogate"),
    ("grad_norm", "mean over mini-batches of the gradient L2 norm"),
];

/// Everything measured during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub iteration: usize,
    pub policy_version: u64,
    pub reward_mean: f64,
    pub reward_generated_mean: f64,
    pub correct_rate: f64,
    pub response_length_mean: f64,
    pub entropy_mean: f64,
    pub entropy_batch_mean: f64,
    pub groups_generated: usize,
    pub groups_kept: usize,
    pub gen_rounds: usize,
    pub hard_fraction: f64,
    pub tokens: usize,
    pub group_counts: [usize; 8],
    pub detached_g1: usize,
    pub detached_g6: usize,
    pub group_entropy: [Option<f64>; 8],
    pub high_low_entropy_gap: f64,
    /// Fraction of objective evaluations per [`Regime`], in `Regime::ALL` order.
    pub regime_fractions: [f64; 6],
    pub ratio_max_deviation: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn detached_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            (self.detached_g1 + self.detached_g6) as f64 / self.tokens as f64
        }
    }

    pub fn regime_fraction(&self, regime: Regime) -> f64 {
        let i = Regime::ALL.iter().position(|r| *r == regime).unwrap_or(0);
        self.regime_fractions[i]
    }

    /// Flat key → number record (keys serialize in sorted order).
    pub fn to_record(&self) -> MetricsRecord {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("schema_version", SCHEMA_VERSION.into());
        put("step", self.step.into());
        put("iteration", self.iteration.into());
        put("policy_version", self.policy_version.into());
        put("reward_mean", num(self.reward_mean));
        put("reward_generated_mean", num(self.reward_generated_mean));
        put("correct_rate", num(self.correct_rate));
        put("response_length_mean", num(self.response_length_mean));
        put("entropy_mean", num(self.entropy_mean));
        put("entropy_batch_mean", num(self.entropy_batch_mean));
        put("groups_generated", self.groups_generated.into());
        put("groups_kept", self.groups_kept.into());
        put("gen_rounds", self.gen_rounds.into());
        put("hard_fraction", num(self.hard_fraction));
        put("tokens", self.tokens.into());
        for label in GroupLabel::ALL {
            put(&format!("count_g{}", label.number()), self.group_counts[label.index()].into());
        }
        put("detached_g1", self.detached_g1.into());
        put("detached_g6", self.detached_g6.into());
        put("detached_fraction", num(self.detached_fraction()));
        for label in GroupLabel::ALL {
            let v = self.group_entropy[label.index()].map_or(Value::Null, num);
            put(&format!("entropy_g{}", label.number()), v);
        }
        put("high_low_entropy_gap", num(self.high_low_entropy_gap));
        put("clip_dead_fraction", num(self.regime_fraction(Regime::ClippedDead)));
        put("regime_in_range", num(self.regime_fraction(Regime::InRange)));
        put("regime_fixed_high", num(self.regime_fraction(Regime::FixedHigh)));
        put("regime_reciprocal_low", num(self.regime_fraction(Regime::ReciprocalLow)));
        put("regime_fixed_low", num(self.regime_fraction(Regime::FixedLow)));
        put("regime_detached", num(self.regime_fraction(Regime::Detached)));
        put("ratio_max_deviation", num(self.ratio_max_deviation));
        put("surrogate", num(self.surrogate));
        put("grad_norm", num(self.grad_norm));
        MetricsRecord(m)
    }
}

fn num(x: f64) -> Value {
    Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// One parsed metrics line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord(pub Map<String, Value>);

impl MetricsRecord {
    /// Numeric value of `key`; `None` when absent or null.
    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn step(&self) -> Option<usize> {
        self.0.get("step").and_then(Value::as_u64).map(|s| s as usize)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Line-delimited metrics sink. Each record is flushed as soon as it is
/// written, so an interrupted run leaves a valid prefix.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    step_offset: usize,
}

impl MetricsWriter {
    /// Truncates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            step_offset: 0,
        })
    }

    /// Appends to `path`, renumbering steps so they continue after the last
    /// record already there.
    pub fn append(path: &Path) -> Result<Self> {
        let step_offset = if path.exists() {
            read_metrics(path)?
                .last()
                .and_then(MetricsRecord::step)
                .map_or(0, |s| s + 1)
        } else {
            0
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            step_offset,
        })
    }

    pub fn step_offset(&self) -> usize {
        self.step_offset
    }

    pub fn write(&mut self, metrics: &StepMetrics) -> Result<()> {
        let mut record = metrics.to_record();
        record
            .0
            .insert("step".into(), (metrics.step + self.step_offset).into());
        let mut line = serde_json::to_string(&record.0).expect("metrics serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics file; malformed lines are reported with their number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(BufReader::new(file), path)
}

pub fn parse_metrics<R: BufRead>(reader: R, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(parse_err("expected a JSON object".into()));
        };
        if !map.get("schema_version").is_some_and(Value::is_u64) {
            return Err(parse_err("missing schema_version".into()));
        }
        if !map.get("step").is_some_and(Value::is_u64) {
            return Err(parse_err("missing step".into()));
        }
        out.push(MetricsRecord(map));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: usize) -> StepMetrics {
        StepMetrics {
            step,
            iteration: 0,
            policy_version: 4,
            reward_mean: 0.5,
            reward_generated_mean: 0.25,
            correct_rate: 0.5,
            response_length_mean: 3.0,
            entropy_mean: 2.0,
            entropy_batch_mean: 1.5,
            groups_generated: 4,
            groups_kept: 2,
            gen_rounds: 1,
            hard_fraction: 0.5,
            tokens: 10,
            group_counts: [1, 1, 1, 1, 1, 1, 2, 2],
            detached_g1: 1,
            detached_g6: 0,
            group_entropy: [Some(1.0), None, None, None, None, None, None, Some(0.5)],
            high_low_entropy_gap: 0.25,
            regime_fractions: [0.5, 0.1, 0.1, 0.1, 0.1, 0.1],
            ratio_max_deviation: 0.3,
            surrogate: 0.01,
            grad_norm: 0.2,
        }
    }

    #[test]
    fn records_carry_exactly_the_documented_keys() {
        let rec = sample(0).to_record();
        let mut keys: Vec<&str> = rec.keys().collect();
        let mut schema: Vec<&str> = METRICS_SCHEMA.iter().map(|(k, _)| *k).collect();
        keys.sort_unstable();
        schema.sort_unstable();
        assert_eq!(keys, schema);
    }

    #[test]
    fn three_steps_make_three_parseable_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for s in 0..3 {
            w.write(&sample(s)).unwrap();
        }
        let recs = read_metrics(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].get("reward_mean"), Some(0.5));
        assert_eq!(recs[0].get("entropy_g2"), None);
        assert_eq!(recs[0].get("schema_version"), Some(SCHEMA_VERSION as f64));
    }

    #[test]
    fn lines_are_durable_before_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&sample(0)).unwrap();
        w.write(&sample(1)).unwrap();
        // the writer is still open: both lines must already be on disk
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
        drop(w);
    }

    #[test]
    fn append_continues_step_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&sample(0)).unwrap();
        w.write(&sample(1)).unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        assert_eq!(w.step_offset(), 2);
        w.write(&sample(0)).unwrap();
        let steps: Vec<usize> = read_metrics(&path)
            .unwrap()
            .iter()
            .map(|r| r.step().unwrap())
            .collect();
        assert_eq!(steps, vec![0, 1, 2]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = format!(
            "{}\nnot json\n",
            serde_json::to_string(&sample(0).to_record().0).unwrap()
        );
        let err = parse_metrics(text.as_bytes(), Path::new("m.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
