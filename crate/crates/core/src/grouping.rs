//! Hierarchical token labels: prompt difficulty × answer correctness × token
//! entropy, plus the entropy-detach sets for groups 1 and 6.
//!
//! All quantiles are taken over the tokens of a single response.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{classify_difficulty, DifficultyClass, RolloutGroup};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingConfig {
    /// Fraction of a response's tokens treated as high-entropy.
    pub high_entropy_fraction: f64,
    /// ρ1: fraction of lowest-entropy tokens detached in group 1.
    pub rho_low: f64,
    /// ρ2: fraction of highest-entropy tokens detached in group 6.
    pub rho_high: f64,
    pub tau_diff: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            high_entropy_fraction: 0.2,
            rho_low: 0.006,
            rho_high: 0.02,
            tau_diff: 0.5,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.high_entropy_fraction > 0.0 && self.high_entropy_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "high_entropy_fraction must be in (0, 1), got {}",
                self.high_entropy_fraction
            )));
        }
        for (name, v) in [("rho_low", self.rho_low), ("rho_high", self.rho_high)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau_diff) {
            return Err(Error::invalid(format!(
                "tau_diff must be in [0, 1], got {}",
                self.tau_diff
            )));
        }
        Ok(())
    }
}

/// The eight token groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
    G7,
    G8,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 8] = [
        GroupLabel::G1,
        GroupLabel::G2,
        GroupLabel::G3,
        GroupLabel::G4,
        GroupLabel::G5,
        GroupLabel::G6,
        GroupLabel::G7,
        GroupLabel::G8,
    ];

    /// Hard/easy × correct/wrong × low/high, in that order of significance.
    pub fn from_parts(class: DifficultyClass, correct: bool, entropy: EntropyClass) -> Self {
        let hard = class == DifficultyClass::Hard;
        let high = entropy == EntropyClass::High;
        match (hard, correct, high) {
            (true, true, false) => GroupLabel::G1,
            (true, true, true) => GroupLabel::G2,
            (true, false, false) => GroupLabel::G3,
            (true, false, true) => GroupLabel::G4,
            (false, true, false) => GroupLabel::G5,
            (false, true, true) => GroupLabel::G6,
            (false, false, false) => GroupLabel::G7,
            (false, false, true) => GroupLabel::G8,
        }
    }

    /// Zero-based index, `G1 → 0`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_number(n: usize) -> Option<Self> {
        (1..=8).contains(&n).then(|| Self::ALL[n - 1])
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn is_hard(self) -> bool {
        self.index() < 4
    }

    pub fn is_correct(self) -> bool {
        matches!(self, GroupLabel::G1 | GroupLabel::G2 | GroupLabel::G5 | GroupLabel::G6)
    }

    pub fn is_high_entropy(self) -> bool {
        self.index() % 2 == 1
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntropyClass {
    Low,
    High,
}

/// Position indices of a response's low- and high-entropy tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntropySplit {
    pub low: Vec<usize>,
    pub high: Vec<usize>,
}

impl EntropySplit {
    pub fn classes(&self, n: usize) -> Vec<EntropyClass> {
        let mut out = vec![EntropyClass::Low; n];
        for &i in &self.high {
            out[i] = EntropyClass::High;
        }
        out
    }
}

/// Tokens selected for detachment and their entropy threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachSet {
    pub threshold: f64,
    pub indices: Vec<usize>,
}

/// `floor(fraction · n)`, robust to the representation error of decimal
/// fractions (0.7 · 10 is 7 here, not 6).
pub fn floor_count(fraction: f64, n: usize) -> usize {
    (((fraction * n as f64) + 1e-9).floor() as usize).min(n)
}

/// Indices `0..n` ordered by (entropy ascending, position ascending).
fn ascending_order(entropies: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entropies.len()).collect();
    idx.sort_by(|&i, &j| entropies[i].total_cmp(&entropies[j]).then(i.cmp(&j)));
    idx
}

/// Splits one response: the first `floor((1 − fraction)·n)` tokens in
/// (entropy, position) order are low-entropy, the rest high-entropy.
/// Entropies are given in position order.
pub fn entropy_split(entropies: &[f64], fraction: f64) -> Result<EntropySplit> {
    if entropies.is_empty() {
        return Err(Error::invalid("entropy split of an empty response"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "high-entropy fraction must be in (0, 1), got {fraction}"
        )));
    }
    let order = ascending_order(entropies);
    let n_low = floor_count(1.0 - fraction, entropies.len());
    let mut low = order[..n_low].to_vec();
    let mut high = order[n_low..].to_vec();
    low.sort_unstable();
    high.sort_unstable();
    Ok(EntropySplit { low, high })
}

/// The `floor(ρ1·n)` lowest tokens by (entropy, position). Threshold is the
/// largest selected entropy, or −∞ when nothing is selected.
pub fn detach_threshold_low(entropies: &[f64], rho: f64) -> DetachSet {
    let k = floor_count(rho, entropies.len());
    let order = ascending_order(entropies);
    let mut indices = order[..k].to_vec();
    let threshold = indices
        .last()
        .map_or(f64::NEG_INFINITY, |&i| entropies[i]);
    indices.sort_unstable();
    DetachSet { threshold, indices }
}

/// The `floor(ρ2·n)` highest tokens by (entropy, then latest position).
/// Threshold is the smallest selected entropy, or +∞ when nothing is selected.
pub fn detach_threshold_high(entropies: &[f64], rho: f64) -> DetachSet {
    let k = floor_count(rho, entropies.len());
    let mut order = ascending_order(entropies);
    order.reverse();
    let mut indices = order[..k].to_vec();
    let threshold = indices.last().map_or(f64::INFINITY, |&i| entropies[i]);
    indices.sort_unstable();
    DetachSet { threshold, indices }
}

/// Labels every token of a rollout group and sets the detach flags.
///
/// Only group-1 tokens in the response's ρ1-lowest set and group-6 tokens in
/// its ρ2-highest set are detached.
pub fn assign_groups(group: &mut RolloutGroup, cfg: &GroupingConfig) -> Result<()> {
    let class = classify_difficulty(group.difficulty, cfg.tau_diff);
    for resp in &mut group.responses {
        if resp.tokens.is_empty() {
            continue;
        }
        let entropies: Vec<f64> = resp.tokens.iter().map(|t| t.entropy).collect();
        let classes = entropy_split(&entropies, cfg.high_entropy_fraction)?.classes(entropies.len());
        let low_set = detach_threshold_low(&entropies, cfg.rho_low);
        let high_set = detach_threshold_high(&entropies, cfg.rho_high);
        resp.tau_low = low_set.threshold;
        resp.tau_high = high_set.threshold;
        for (i, tok) in resp.tokens.iter_mut().enumerate() {
            let label = GroupLabel::from_parts(class, resp.correct, classes[i]);
            tok.label = Some(label);
            tok.detached = match label {
                GroupLabel::G1 => low_set.indices.binary_search(&i).is_ok(),
                GroupLabel::G6 => high_set.indices.binary_search(&i).is_ok(),
                _ => false,
            };
        }
    }
    Ok(())
}
