//! Token-level objectives: the clipped surrogate, the group-specific HTPO
//! variants, and their gradient weights.
//!
//! Every objective here has gradient `w · Â · ∇log π` at the evaluation point.
//! Stop-gradient factors are modelled by [`SurrogateTerm`], which freezes
//! `SG[π]` (and the branch choice) at the point where the weight is computed
//! and then evaluates the objective as a function of the live log-probability.
//! `value_at(sg_log_prob)` is the logged surrogate value; its derivative with
//! respect to the live log-probability is `w · Â`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupLabel;
use crate::rollout::TokenRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn symmetric(eps: f64) -> Self {
        Self {
            eps_low: eps,
            eps_high: eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::invalid(format!(
                "eps_low must be in (0, 1), got {}",
                self.eps_low
            )));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::invalid(format!(
                "eps_high must be positive, got {}",
                self.eps_high
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }
}

/// Which branch produced a token's objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    InRange,
    ClippedDead,
    FixedHigh,
    ReciprocalLow,
    FixedLow,
    Detached,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::InRange,
        Regime::ClippedDead,
        Regime::FixedHigh,
        Regime::ReciprocalLow,
        Regime::FixedLow,
        Regime::Detached,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenObjective {
    /// Contribution to the surrogate.
    pub value: f64,
    /// `w` such that the gradient is `w · Â · score`.
    pub grad_weight: f64,
    pub regime: Regime,
}

/// `π_new / π_old`, strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ImportanceRatio(f64);

impl ImportanceRatio {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("importance ratio must be positive and finite, got {r}")));
        }
        Ok(Self(r))
    }

    pub fn from_log_probs(new_log_prob: f64, old_log_prob: f64) -> Result<Self> {
        Self::new((new_log_prob - old_log_prob).exp())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Objective family applied to every token of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Htpo,
    Dapo,
    Grpo,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "htpo" => Ok(Self::Htpo),
            "dapo" | "dapo-baseline" => Ok(Self::Dapo),
            "grpo" | "grpo-baseline" => Ok(Self::Grpo),
            _ => Err(Error::invalid(format!("unknown objective mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Htpo => "htpo",
            Self::Dapo => "dapo",
            Self::Grpo => "grpo",
        })
    }
}

/// Set of groups whose specialised objective is active. Groups outside the
/// set fall back to the clipped surrogate. Only G1, G2, G4, G6 and G8 have
/// specialised objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpecialGroups(u8);

impl SpecialGroups {
    pub const ALL: SpecialGroups = SpecialGroups(0b1010_1011);
    pub const NONE: SpecialGroups = SpecialGroups(0);

    pub fn from_labels(labels: &[GroupLabel]) -> Self {
        Self(labels.iter().fold(0, |m, l| m | 1 << l.index()))
    }

    pub fn contains(self, label: GroupLabel) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn labels(self) -> Vec<GroupLabel> {
        GroupLabel::ALL.into_iter().filter(|&l| self.contains(l)).collect()
    }
}

impl Default for SpecialGroups {
    fn default() -> Self {
        Self::ALL
    }
}

impl std::fmt::Display for SpecialGroups {
    /// Comma-separated group numbers, `none` when empty.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nums: Vec<String> = self.labels().iter().map(|l| l.number().to_string()).collect();
        if nums.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&nums.join(","))
        }
    }
}

impl std::str::FromStr for SpecialGroups {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(Self::NONE);
        }
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let labels = s
            .split(',')
            .map(|part| {
                part.trim()
                    .trim_start_matches(['G', 'g'])
                    .parse::<usize>()
                    .ok()
                    .and_then(GroupLabel::from_number)
                    .ok_or_else(|| Error::invalid(format!("bad group number {part:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_labels(&labels))
    }
}

/// Clipped surrogate `min(r·Â, clip(r, 1−ε_low, 1+ε_high)·Â)`.
///
/// Inside the closed trust region the weight is `r`. Outside it the token is
/// clip-dead: it keeps the surrogate value but contributes no gradient, on
/// either side of the region and for either advantage sign.
pub fn clipped_objective(r: ImportanceRatio, advantage: f64, cfg: &ClipConfig) -> TokenObjective {
    let r = r.value();
    let value = (r * advantage).min(r.clamp(cfg.lower(), cfg.upper()) * advantage);
    if r < cfg.lower() || r > cfg.upper() {
        TokenObjective {
            value,
            grad_weight: 0.0,
            regime: Regime::ClippedDead,
        }
    } else {
        TokenObjective {
            value,
            grad_weight: r,
            regime: Regime::InRange,
        }
    }
}

/// Group 2 (hard, correct, high-entropy): never clip-dead. Above `1+ε_high`
/// the ratio is fixed at `1+ε_high`; below `1−ε_low` it is replaced by its
/// reciprocal, capped at `1+ε_high`.
pub fn g2_objective(r: ImportanceRatio, advantage: f64, cfg: &ClipConfig) -> Result<TokenObjective> {
    if !(advantage > 0.0) {
        return Err(Error::invalid(format!(
            "group 2 objective needs a positive advantage, got {advantage}"
        )));
    }
    let rv = r.value();
    Ok(if rv > cfg.upper() {
        let w = cfg.upper();
        TokenObjective {
            value: w * advantage,
            grad_weight: w,
            regime: Regime::FixedHigh,
        }
    } else if rv < cfg.lower() {
        let w = (1.0 / rv).min(cfg.upper());
        TokenObjective {
            value: w * advantage,
            grad_weight: w,
            regime: Regime::ReciprocalLow,
        }
    } else {
        clipped_objective(r, advantage, cfg)
    })
}

/// Groups 4 and 8 (wrong, high-entropy): below `1−ε_low` the ratio is fixed
/// at `1−ε_low` with a live gradient instead of being clipped away.
pub fn g4_g8_objective(r: ImportanceRatio, advantage: f64, cfg: &ClipConfig) -> Result<TokenObjective> {
    if !(advantage < 0.0) {
        return Err(Error::invalid(format!(
            "group 4/8 objective needs a negative advantage, got {advantage}"
        )));
    }
    Ok(if r.value() < cfg.lower() {
        let w = cfg.lower();
        TokenObjective {
            value: w * advantage,
            grad_weight: w,
            regime: Regime::FixedLow,
        }
    } else {
        clipped_objective(r, advantage, cfg)
    })
}

pub fn detached_objective() -> TokenObjective {
    TokenObjective {
        value: 0.0,
        grad_weight: 0.0,
        regime: Regime::Detached,
    }
}

/// Consolidated HTPO dispatch on `(label, detached)`.
pub fn htpo_objective_parts(
    label: GroupLabel,
    detached: bool,
    r: ImportanceRatio,
    advantage: f64,
    cfg: &ClipConfig,
    special: SpecialGroups,
) -> Result<TokenObjective> {
    if detached {
        if !matches!(label, GroupLabel::G1 | GroupLabel::G6) {
            return Err(Error::InvalidState(format!(
                "detached flag on a {label} token"
            )));
        }
        if special.contains(label) {
            return Ok(detached_objective());
        }
    }
    // zero-advantage tokens carry no signal under any objective
    if !special.contains(label) || advantage == 0.0 {
        return Ok(clipped_objective(r, advantage, cfg));
    }
    match label {
        GroupLabel::G2 => g2_objective(r, advantage, cfg),
        GroupLabel::G4 | GroupLabel::G8 => g4_g8_objective(r, advantage, cfg),
        _ => Ok(clipped_objective(r, advantage, cfg)),
    }
}

/// [`htpo_objective_parts`] for a labeled token with all groups active.
pub fn htpo_objective(token: &TokenRecord, r: ImportanceRatio, cfg: &ClipConfig) -> Result<TokenObjective> {
    let label = token.label.ok_or_else(|| {
        Error::InvalidState(format!(
            "token at position {} has no group label",
            token.position
        ))
    })?;
    htpo_objective_parts(label, token.detached, r, token.advantage, cfg, SpecialGroups::ALL)
}

/// Gradient weight `w_t` read off the unified weight table, without going
/// through the objective dispatch.
pub fn unified_weight(label: GroupLabel, detached: bool, r: f64, advantage_sign: f64, cfg: &ClipConfig) -> f64 {
    use GroupLabel::*;
    let lo = 1.0 - cfg.eps_low;
    let hi = 1.0 + cfg.eps_high;
    if detached && matches!(label, G1 | G6) {
        return 0.0;
    }
    if advantage_sign == 0.0 {
        return base_weight(r, lo, hi);
    }
    match label {
        G2 if r > hi => hi,
        G2 if r < lo => (1.0 / r).min(hi),
        G4 | G8 if r < lo => lo,
        _ => base_weight(r, lo, hi),
    }
}

fn base_weight(r: f64, lo: f64, hi: f64) -> f64 {
    if r < lo || r > hi {
        0.0
    } else {
        r
    }
}

/// Forward model of one token's objective with stop-gradient constants frozen
/// at a reference point.
///
/// The branch and every `SG[·]` factor are fixed by `sg_log_prob` (the live
/// log-probability at the reference point); [`SurrogateTerm::value_at`] then
/// varies only the differentiable `π_θ` factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    regime: Regime,
    advantage: f64,
    old_log_prob: f64,
    sg_log_prob: f64,
    /// Frozen multiplier for the fixed-ratio branches, or the constant value
    /// of the dead branch.
    factor: f64,
}

impl SurrogateTerm {
    /// Builds the term from the objective evaluated at the reference point.
    pub fn new(objective: &TokenObjective, advantage: f64, old_log_prob: f64, sg_log_prob: f64) -> Self {
        let factor = match objective.regime {
            Regime::FixedHigh | Regime::ReciprocalLow | Regime::FixedLow => objective.grad_weight,
            Regime::ClippedDead => objective.value,
            Regime::InRange | Regime::Detached => 0.0,
        };
        Self {
            regime: objective.regime,
            advantage,
            old_log_prob,
            sg_log_prob,
            factor,
        }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// Objective value with the live log-probability set to `live_log_prob`.
    pub fn value_at(&self, live_log_prob: f64) -> f64 {
        match self.regime {
            Regime::InRange => (live_log_prob - self.old_log_prob).exp() * self.advantage,
            Regime::ClippedDead => self.factor,
            // factor · π_θ / SG[π_θ] · Â
            Regime::FixedHigh | Regime::ReciprocalLow | Regime::FixedLow => {
                self.factor * (live_log_prob - self.sg_log_prob).exp() * self.advantage
            }
            Regime::Detached => 0.0,
        }
    }

    /// `d value / d log π` at the reference point, i.e. `w · Â`.
    pub fn log_prob_derivative(&self) -> f64 {
        match self.regime {
            Regime::InRange => (self.sg_log_prob - self.old_log_prob).exp() * self.advantage,
            Regime::FixedHigh | Regime::ReciprocalLow | Regime::FixedLow => self.factor * self.advantage,
            Regime::ClippedDead | Regime::Detached => 0.0,
        }
    }
}

/// Token-mean of the objective values across the whole batch.
pub fn aggregate<'a, I>(responses: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for values in responses {
        sum += values.iter().sum::<f64>();
        count += values.len();
    }
    if count == 0 {
        return Err(Error::invalid("cannot aggregate an empty batch"));
    }
    Ok(sum / count as f64)
}
