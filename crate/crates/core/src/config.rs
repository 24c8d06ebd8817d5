//! Run configuration: plain-text `key = value` files with flat dotted keys.
//!
//! Resolution is layered: built-in profile defaults, then the file, then
//! command-line overrides. Values use TOML literal syntax (`0.2`, `true`,
//! `"htpo"`); string values may also be written bare.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveMode, SpecialGroups};
use crate::tasks::LengthDistribution;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Tabular toy scale; runs in seconds.
    Desk,
    /// Reference LLM-scale batch and optimizer settings; not meant to be run
    /// on the toy task.
    Llm,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "llm" => Ok(Profile::Llm),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Prompts in the generated evaluation set.
    pub eval_prompts: usize,
    /// Samples per evaluation prompt.
    pub eval_samples: usize,
    /// Seed of the evaluation prompt set and sampling, independent of training.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Int => "integer",
            Kind::Float => "float",
            Kind::Bool => "boolean",
            Kind::Str => "string",
        }
    }
}

/// Every accepted key, in echo order, with its value kind.
const KEYS: &[(&str, Kind)] = &[
    ("task.vocab_size", Kind::Int),
    ("task.lengths", Kind::Str),
    ("data.train_batch_size", Kind::Int),
    ("data.gen_batch_size", Kind::Int),
    ("algorithm.filter_groups.enable", Kind::Bool),
    ("algorithm.filter_groups.max_num_gen_batches", Kind::Int),
    ("algorithm.norm_adv_by_std_in_grpo", Kind::Bool),
    ("algorithm.adv_std_floor", Kind::Float),
    ("actor_rollout_ref.rollout.n", Kind::Int),
    ("actor_rollout_ref.rollout.temperature", Kind::Float),
    ("actor_rollout_ref.actor.ppo_mini_batch_size", Kind::Int),
    ("actor_rollout_ref.actor.optim.lr", Kind::Float),
    ("actor_rollout_ref.actor.clip_ratio_low", Kind::Float),
    ("actor_rollout_ref.actor.clip_ratio_high", Kind::Float),
    ("actor_rollout_ref.actor.policy_loss.mode", Kind::Str),
    ("actor_rollout_ref.actor.policy_loss.special_groups", Kind::Str),
    ("actor_rollout_ref.actor.policy_loss.high_entropy_fraction", Kind::Float),
    ("actor_rollout_ref.actor.policy_loss.clip_entropy_ratio1", Kind::Float),
    ("actor_rollout_ref.actor.policy_loss.clip_entropy_ratio2", Kind::Float),
    ("actor_rollout_ref.actor.policy_loss.difficulty_level", Kind::Float),
    ("trainer.iterations", Kind::Int),
    ("trainer.steps_per_iteration", Kind::Int),
    ("trainer.seed", Kind::Int),
    ("trainer.workers", Kind::Int),
    ("trainer.strict_deterministic", Kind::Bool),
    ("trainer.output_dir", Kind::Str),
    ("trainer.eval_prompts", Kind::Int),
    ("trainer.eval_samples", Kind::Int),
    ("trainer.eval_seed", Kind::Int),
];

/// Names of every accepted key.
pub fn config_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _)| *k)
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

/// Parses a TOML literal, falling back to a bare string for string keys.
fn parse_value(raw: &str, kind: Kind) -> std::result::Result<Value, String> {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    let mismatch = || format!("expected {}, got `{raw}`", kind.name());
    match (kind, parsed) {
        (Kind::Int, Some(toml::Value::Integer(i))) => Ok(Value::Int(i)),
        (Kind::Float, Some(toml::Value::Float(f))) => Ok(Value::Float(f)),
        (Kind::Float, Some(toml::Value::Integer(i))) => Ok(Value::Float(i as f64)),
        (Kind::Bool, Some(toml::Value::Boolean(b))) => Ok(Value::Bool(b)),
        (Kind::Str, Some(toml::Value::String(s))) => Ok(Value::Str(s)),
        (Kind::Str, None) if !raw.is_empty() => Ok(Value::Str(raw.to_string())),
        _ => Err(mismatch()),
    }
}

fn as_usize(v: &Value) -> std::result::Result<usize, String> {
    match v {
        Value::Int(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(format!("expected a non-negative integer, got {v:?}")),
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = Self {
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/htpo"),
            eval_prompts: 512,
            eval_samples: 8,
            eval_seed: 1234,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Llm => {
                let mut c = desk;
                c.train.gen_batch = 256;
                c.train.train_batch = 128;
                c.train.group_size = 16;
                c.train.mini_batch = 32;
                c.train.learning_rate = 1e-6;
                c.eval_samples = 32;
                c
            }
        }
    }

    fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let float = |v: &Value| match v {
            Value::Float(f) => Ok(*f),
            _ => Err(format!("expected float, got {v:?}")),
        };
        let boolean = |v: &Value| match v {
            Value::Bool(b) => Ok(*b),
            _ => Err(format!("expected boolean, got {v:?}")),
        };
        let string = |v: &Value| match v {
            Value::Str(s) => Ok(s.clone()),
            _ => Err(format!("expected string, got {v:?}")),
        };
        match key {
            "task.vocab_size" => t.vocab = as_usize(v)?,
            "task.lengths" => {
                t.lengths = string(v)?
                    .parse::<LengthDistribution>()
                    .map_err(|e| e.to_string())?
            }
            "data.train_batch_size" => t.train_batch = as_usize(v)?,
            "data.gen_batch_size" => t.gen_batch = as_usize(v)?,
            "algorithm.filter_groups.enable" => t.filter_groups = boolean(v)?,
            "algorithm.filter_groups.max_num_gen_batches" => t.max_gen_rounds = as_usize(v)?,
            "algorithm.norm_adv_by_std_in_grpo" => t.advantage.normalize_by_std = boolean(v)?,
            "algorithm.adv_std_floor" => t.advantage.std_floor = float(v)?,
            "actor_rollout_ref.rollout.n" => t.group_size = as_usize(v)?,
            "actor_rollout_ref.rollout.temperature" => t.temperature = float(v)?,
            "actor_rollout_ref.actor.ppo_mini_batch_size" => t.mini_batch = as_usize(v)?,
            "actor_rollout_ref.actor.optim.lr" => t.learning_rate = float(v)?,
            "actor_rollout_ref.actor.clip_ratio_low" => t.clip.eps_low = float(v)?,
            "actor_rollout_ref.actor.clip_ratio_high" => t.clip.eps_high = float(v)?,
            "actor_rollout_ref.actor.policy_loss.mode" => {
                t.mode = string(v)?.parse::<ObjectiveMode>().map_err(|e| e.to_string())?
            }
            "actor_rollout_ref.actor.policy_loss.special_groups" => {
                t.special = string(v)?.parse::<SpecialGroups>().map_err(|e| e.to_string())?
            }
            "actor_rollout_ref.actor.policy_loss.high_entropy_fraction" => {
                t.grouping.high_entropy_fraction = float(v)?
            }
            "actor_rollout_ref.actor.policy_loss.clip_entropy_ratio1" => t.grouping.rho_low = float(v)?,
            "actor_rollout_ref.actor.policy_loss.clip_entropy_ratio2" => t.grouping.rho_high = float(v)?,
            "actor_rollout_ref.actor.policy_loss.difficulty_level" => t.grouping.tau_diff = float(v)?,
            "trainer.iterations" => t.iterations = as_usize(v)?,
            "trainer.steps_per_iteration" => t.steps_per_iteration = as_usize(v)?,
            "trainer.seed" => t.seed = as_usize(v)? as u64,
            "trainer.workers" => t.workers = as_usize(v)?,
            "trainer.strict_deterministic" => t.strict = boolean(v)?,
            "trainer.output_dir" => self.output_dir = PathBuf::from(string(v)?),
            "trainer.eval_prompts" => self.eval_prompts = as_usize(v)?,
            "trainer.eval_samples" => self.eval_samples = as_usize(v)?,
            "trainer.eval_seed" => self.eval_seed = as_usize(v)? as u64,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies one `key = value` assignment; `line` is used for errors.
    fn apply(&mut self, key: &str, raw: &str, path: &Path, line: usize) -> Result<()> {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let kind = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, kind)| *kind)
            .ok_or_else(|| err(format!("unknown key `{key}`")))?;
        let value = parse_value(raw, kind).map_err(|m| err(format!("field `{key}`: {m}")))?;
        self.set(key, &value)
            .map_err(|m| err(format!("field `{key}`: {m}")))
    }

    /// Parses `key = value` lines on top of `self`. `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.apply(key.trim(), value.trim(), path, i + 1)?;
        }
        Ok(())
    }

    /// Applies a command-line `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{assignment}` is not `key=value`"))
        })?;
        self.apply(key.trim(), value.trim(), Path::new("<override>"), 1)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval_prompts == 0 || self.eval_samples == 0 {
            return Err(Error::Config("evaluation needs prompts and samples".into()));
        }
        Ok(())
    }

    /// Resolves `profile` defaults ← `file` ← `overrides`.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::profile(profile);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.merge_text(&text, path)?;
        }
        for o in overrides {
            cfg.set_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text, Path::new("<string>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = match *key {
                "task.vocab_size" => t.vocab.to_string(),
                "task.lengths" => quote(&t.lengths.to_string()),
                "data.train_batch_size" => t.train_batch.to_string(),
                "data.gen_batch_size" => t.gen_batch.to_string(),
                "algorithm.filter_groups.enable" => t.filter_groups.to_string(),
                "algorithm.filter_groups.max_num_gen_batches" => t.max_gen_rounds.to_string(),
                "algorithm.norm_adv_by_std_in_grpo" => t.advantage.normalize_by_std.to_string(),
                "algorithm.adv_std_floor" => float(t.advantage.std_floor),
                "actor_rollout_ref.rollout.n" => t.group_size.to_string(),
                "actor_rollout_ref.rollout.temperature" => float(t.temperature),
                "actor_rollout_ref.actor.ppo_mini_batch_size" => t.mini_batch.to_string(),
                "actor_rollout_ref.actor.optim.lr" => float(t.learning_rate),
                "actor_rollout_ref.actor.clip_ratio_low" => float(t.clip.eps_low),
                "actor_rollout_ref.actor.clip_ratio_high" => float(t.clip.eps_high),
                "actor_rollout_ref.actor.policy_loss.mode" => quote(&t.mode.to_string()),
                "actor_rollout_ref.actor.policy_loss.special_groups" => quote(&t.special.to_string()),
                "actor_rollout_ref.actor.policy_loss.high_entropy_fraction" => {
                    float(t.grouping.high_entropy_fraction)
                }
                "actor_rollout_ref.actor.policy_loss.clip_entropy_ratio1" => float(t.grouping.rho_low),
                "actor_rollout_ref.actor.policy_loss.clip_entropy_ratio2" => float(t.grouping.rho_high),
                "actor_rollout_ref.actor.policy_loss.difficulty_level" => float(t.grouping.tau_diff),
                "trainer.iterations" => t.iterations.to_string(),
                "trainer.steps_per_iteration" => t.steps_per_iteration.to_string(),
                "trainer.seed" => t.seed.to_string(),
                "trainer.workers" => t.workers.to_string(),
                "trainer.strict_deterministic" => t.strict.to_string(),
                "trainer.output_dir" => quote(&self.output_dir.display().to_string()),
                "trainer.eval_prompts" => self.eval_prompts.to_string(),
                "trainer.eval_samples" => self.eval_samples.to_string(),
                "trainer.eval_seed" => self.eval_seed.to_string(),
                _ => unreachable!("key table and echo out of sync"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    // a `#` inside a quoted string is part of the value
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Shortest representation that parses back to the same bits, always with a
/// decimal point or exponent so it reads back as a float.
fn float(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || !x.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c.train.grouping.rho_low, 0.006);
        assert_eq!(c.train.grouping.rho_high, 0.02);
        assert_eq!(c.train.grouping.tau_diff, 0.5);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn clip_high_is_applied() {
        let c = RunConfig::parse_str("actor_rollout_ref.actor.clip_ratio_high = 0.28\n").unwrap();
        assert_eq!(c.train.clip.eps_high, 0.28);
        let c = RunConfig::parse_str("actor_rollout_ref.actor.clip_ratio_high = 0.3 # wider\n").unwrap();
        assert_eq!(c.train.clip.eps_high, 0.3);
    }

    #[test]
    fn indivisible_mini_batch_is_rejected() {
        let text = "data.train_batch_size = 16\nactor_rollout_ref.actor.ppo_mini_batch_size = 5\n";
        assert!(matches!(RunConfig::parse_str(text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_str("# header\nactor.clip_ratio_hi = 0.3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("actor.clip_ratio_hi"), "{msg}");
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn type_mismatch_names_line_and_field() {
        let err = RunConfig::parse_str("\n\ndata.train_batch_size = \"many\"\n").unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("data.train_batch_size"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(RunConfig::parse_str("trainer.strict_deterministic = 1").is_err());
        assert!(RunConfig::parse_str("trainer.seed = -3").is_err());
    }

    #[test]
    fn bare_and_quoted_strings() {
        let c = RunConfig::parse_str("actor_rollout_ref.actor.policy_loss.mode = grpo\ntask.lengths = \"2-3\"").unwrap();
        assert_eq!(c.train.mode, ObjectiveMode::Grpo);
        assert_eq!(c.train.lengths.lengths(), &[2, 3]);
    }

    #[test]
    fn echo_round_trips() {
        let text = "actor_rollout_ref.actor.optim.lr = 0.1\ntrainer.seed = 9\n\
                    actor_rollout_ref.actor.policy_loss.special_groups = \"2,4\"\n\
                    algorithm.adv_std_floor = 1e-7\ntask.lengths = \"1:0.25,3:0.75\"\n";
        let a = RunConfig::parse_str(text).unwrap();
        let b = RunConfig::parse_str(&a.echo()).unwrap();
        assert_eq!(a, b);
        assert_eq!(RunConfig::parse_str(&b.echo()).unwrap(), b);
        for p in [Profile::Desk, Profile::Llm] {
            let c = RunConfig::profile(p);
            let mut back = RunConfig::profile(Profile::Desk);
            back.merge_text(&c.echo(), Path::new("x")).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn echo_lists_every_key_once() {
        let echo = RunConfig::default().echo();
        let keys: Vec<&str> = echo.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, config_keys().collect::<Vec<_>>());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "trainer.seed = 3\nactor_rollout_ref.rollout.n = 4\n").unwrap();
        let c = RunConfig::resolve(Profile::Desk, Some(&path), &["trainer.seed=5".into()]).unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.group_size, 4);
        assert!(RunConfig::resolve(Profile::Desk, None, &["nope=1".into()]).is_err());
    }

    #[test]
    fn llm_profile_mirrors_reference_batches() {
        let c = RunConfig::profile(Profile::Llm);
        assert_eq!(c.train.train_batch, 128);
        assert_eq!(c.train.gen_batch, 256);
        assert_eq!(c.train.group_size, 16);
        assert_eq!(c.train.mini_batch, 32);
        assert_eq!(c.train.learning_rate, 1e-6);
        assert_eq!(c.train.clip.eps_high, 0.28);
        c.validate().unwrap();
    }
}
