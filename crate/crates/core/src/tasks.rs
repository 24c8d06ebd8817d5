//! Affine-chain sequence tasks with binary verifiable rewards.
//!
//! A prompt `(a, b, s, L)` asks for the chain `o_1 = (a·s + b) mod V`,
//! `o_t = (a·o_{t-1} + b) mod V`. The policy conditions on `(a, b, previous
//! token)`, with `s` standing in for the previous token at the first step, so
//! every transition is one learnable table row and long chains stay hard until
//! all their rows are right.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{ContextKey, KeySpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskPrompt {
    pub a: usize,
    pub b: usize,
    pub s: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub correct: bool,
    pub reward: f64,
}

impl Verdict {
    fn of(correct: bool) -> Self {
        Self {
            correct,
            reward: if correct { 1.0 } else { 0.0 },
        }
    }
}

/// Distribution over target lengths: the difficulty knob.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDistribution {
    lengths: Vec<usize>,
    weights: Vec<f64>,
}

impl LengthDistribution {
    pub fn new(pairs: Vec<(usize, f64)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().filter(|&(_, w)| w > 0.0).collect();
        if pairs.is_empty() {
            return Err(Error::invalid("length distribution is empty"));
        }
        if let Some(&(l, w)) = pairs.iter().find(|(l, w)| *l == 0 || !w.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid length distribution entry {l}:{w}"
            )));
        }
        let (lengths, weights) = pairs.into_iter().unzip();
        Ok(Self { lengths, weights })
    }

    /// Uniform over `lo..=hi`.
    pub fn uniform(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::invalid(format!("empty length range {lo}-{hi}")));
        }
        Self::new((lo..=hi).map(|l| (l, 1.0)).collect())
    }

    pub fn fixed(len: usize) -> Result<Self> {
        Self::new(vec![(len, 1.0)])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Normalized probabilities aligned with [`Self::lengths`].
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.lengths.len() == 1 {
            return self.lengths[0];
        }
        let dist = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        self.lengths[dist.sample(rng)]
    }
}

impl fmt::Display for LengthDistribution {
    /// `lo-hi` for uniform ranges, otherwise `len:weight,...`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let uniform = self.weights.iter().all(|&w| w == self.weights[0]);
        let contiguous = self.lengths.windows(2).all(|w| w[1] == w[0] + 1);
        if uniform && contiguous {
            return write!(f, "{}-{}", self.lengths[0], self.lengths[self.lengths.len() - 1]);
        }
        let parts: Vec<String> = self
            .lengths
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| format!("{l}:{w:?}"))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl std::str::FromStr for LengthDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("cannot parse length distribution {s:?}"));
        if s.contains(':') {
            let pairs = s
                .split(',')
                .map(|part| {
                    let (l, w) = part.split_once(':').ok_or_else(bad)?;
                    Ok((
                        l.trim().parse().map_err(|_| bad())?,
                        w.trim().parse().map_err(|_| bad())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Self::new(pairs)
        } else if let Some((lo, hi)) = s.split_once('-') {
            Self::uniform(lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)
        } else {
            Self::fixed(s.parse().map_err(|_| bad())?)
        }
    }
}

/// Task family over a vocabulary of size `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineTask {
    vocab: usize,
}

impl AffineTask {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid(format!("vocabulary size {vocab} < 2")));
        }
        Ok(Self { vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn prompt(&self, a: usize, b: usize, s: usize, len: usize) -> Result<TaskPrompt> {
        let p = TaskPrompt { a, b, s, len };
        self.validate(&p)?;
        Ok(p)
    }

    pub fn validate(&self, p: &TaskPrompt) -> Result<()> {
        if p.len == 0 {
            return Err(Error::invalid("prompt length must be at least 1"));
        }
        if p.a >= self.vocab || p.b >= self.vocab || p.s >= self.vocab {
            return Err(Error::invalid(format!(
                "prompt {p:?} has a field outside [0, {})",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Key layout `(a, b, previous token)`.
    pub fn key_space(&self) -> KeySpace {
        KeySpace::new(vec![self.vocab; 3]).expect("vocab >= 2")
    }

    /// Context key for the next token given the previous one (`s` at step 1).
    pub fn context_key(&self, prompt: &TaskPrompt, prev: usize) -> ContextKey {
        ContextKey::from_row((prompt.a * self.vocab + prompt.b) * self.vocab + prev)
    }

    pub fn next_token(&self, prompt: &TaskPrompt, prev: usize) -> usize {
        (prompt.a * prev + prompt.b) % self.vocab
    }

    pub fn target_sequence(&self, prompt: &TaskPrompt) -> Vec<usize> {
        let mut prev = prompt.s;
        (0..prompt.len)
            .map(|_| {
                prev = self.next_token(prompt, prev);
                prev
            })
            .collect()
    }

    pub fn verify(&self, prompt: &TaskPrompt, response: &[usize]) -> Verdict {
        Verdict::of(response == self.target_sequence(prompt).as_slice())
    }

    pub fn sample_prompt<R: Rng + ?Sized>(
        &self,
        lengths: &LengthDistribution,
        rng: &mut R,
    ) -> TaskPrompt {
        let a = rng.gen_range(0..self.vocab);
        let b = rng.gen_range(0..self.vocab);
        let s = rng.gen_range(0..self.vocab);
        TaskPrompt {
            a,
            b,
            s,
            len: lengths.sample(rng),
        }
    }
}

/// Writes a prompt set: one `a b s L` record per line.
pub fn write_prompt_set<W: Write>(mut w: W, prompts: &[TaskPrompt]) -> std::io::Result<()> {
    writeln!(w, "# a b s L")?;
    for p in prompts {
        writeln!(w, "{} {} {} {}", p.a, p.b, p.s, p.len)?;
    }
    w.flush()
}

/// Reads a prompt set. Blank lines and `#` comments are skipped.
pub fn read_prompt_set<R: BufRead>(r: R, task: &AffineTask, path: &Path) -> Result<Vec<TaskPrompt>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields = body
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        let [a, b, s, len] = fields[..] else {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        };
        let p = task
            .prompt(a, b, s, len)
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_prompt_set(path: &Path, task: &AffineTask) -> Result<Vec<TaskPrompt>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_prompt_set(std::io::BufReader::new(file), task, path)
}

pub fn save_prompt_set(path: &Path, prompts: &[TaskPrompt]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_prompt_set(std::io::BufWriter::new(file), prompts).map_err(|e| Error::io(path, e))
}
