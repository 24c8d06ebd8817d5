//! Inter-group gradient consistency diagnostics and entropy statistics.
//!
//! Gradients live in the full logit space of the policy table, but each token
//! only touches its own row, so vectors are stored sparsely by row.

use std::collections::BTreeMap;
use std::io::Write;

use crate::audit::AuditRecord;
use crate::error::{Error, Result};
use crate::grouping::{floor_count, GroupLabel};
use crate::metrics::MetricsRecord;

/// Cosine slack absorbing rounding in the bound comparison.
pub const BOUND_SLACK: f64 = 1e-12;

/// Clipping contraction factor `(1 − ε)² / (1 + ε)²`.
pub fn kappa(eps: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("epsilon must be in [0, 1), got {eps}")));
    }
    Ok(((1.0 - eps) / (1.0 + eps)).powi(2))
}

/// Smaller root of `κ(1 − η)² = 2η`: the largest direction deviation for
/// which the consistency bound stays positive under full-strength signals.
pub fn eta_critical(kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    Ok((kappa + 1.0 - (2.0 * kappa + 1.0).sqrt()) / kappa)
}

/// Lower bound `κ(1 − η)² α_j α_k β² − 2η` on the cosine similarity of two
/// group gradients. May be negative, in which case it says nothing.
pub fn consistency_bound(eta: f64, kappa: f64, alpha_j: f64, alpha_k: f64, beta: f64) -> f64 {
    kappa * (1.0 - eta).powi(2) * alpha_j * alpha_k * beta * beta - 2.0 * eta
}

/// Sparse vector over policy rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowVector {
    rows: BTreeMap<usize, Vec<f64>>,
}

impl RowVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// `self += scale · v` placed at `row`.
    pub fn add_row(&mut self, row: usize, v: &[f64], scale: f64) {
        let dst = self.rows.entry(row).or_insert_with(|| vec![0.0; v.len()]);
        for (d, x) in dst.iter_mut().zip(v) {
            *d += scale * x;
        }
    }

    pub fn dot(&self, other: &RowVector) -> f64 {
        let mut s = 0.0;
        for (row, a) in &self.rows {
            if let Some(b) = other.rows.get(row) {
                s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.rows.values_mut() {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }
}

/// Cosine similarity clamped to `[−1, 1]`; 0 if either vector is zero.
pub fn cosine(a: &RowVector, b: &RowVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// One token's ingredients for gradient analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGradient {
    pub label: GroupLabel,
    pub advantage: f64,
    pub weight: f64,
    pub row: usize,
    /// Gradient of the token's log-probability w.r.t. its row.
    pub score: Vec<f64>,
}

impl From<&AuditRecord> for TokenGradient {
    fn from(r: &AuditRecord) -> Self {
        Self {
            label: r.label,
            advantage: r.advantage,
            weight: r.weight,
            row: r.row,
            score: r.score.clone(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Measured direction-stability constants of a token set.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionStability {
    /// Unit reference direction.
    pub d_star: RowVector,
    /// `1 − min cos(Â·score, d*)`, clamped to `[0, 1]`.
    pub eta: f64,
    /// The same before clamping; in `[0, 2]`.
    pub eta_raw: f64,
    /// `mean |Â| / A_max` per group; `None` for groups without tokens.
    pub alpha: [Option<f64>; 8],
    /// Mean score norm over `G_max`.
    pub beta: f64,
    pub a_max: f64,
    pub g_max: f64,
}

/// Reference direction, deviation and signal-strength constants.
///
/// `d*` is the normalised sum of every token's advantage-weighted score; `η`
/// is measured over the tokens whose weighted score is nonzero.
pub fn estimate_direction_stability(tokens: &[TokenGradient]) -> Result<DirectionStability> {
    if tokens.is_empty() {
        return Err(Error::Degenerate("empty token set".into()));
    }
    let mut d = RowVector::new();
    for t in tokens {
        d.add_row(t.row, &t.score, t.advantage);
    }
    let dn = d.norm();
    if !(dn > 0.0 && dn.is_finite()) {
        return Err(Error::Degenerate(
            "advantage-weighted scores sum to zero".into(),
        ));
    }
    d.scale(1.0 / dn);

    let mut min_cos: f64 = 1.0;
    let mut a_max: f64 = 0.0;
    let mut g_max: f64 = 0.0;
    let mut score_norm_sum = 0.0;
    let mut abs_adv = [(0.0f64, 0usize); 8];
    for t in tokens {
        let sn = norm(&t.score);
        a_max = a_max.max(t.advantage.abs());
        g_max = g_max.max(sn);
        score_norm_sum += sn;
        let slot = &mut abs_adv[t.label.index()];
        slot.0 += t.advantage.abs();
        slot.1 += 1;
        let vn = t.advantage.abs() * sn;
        if vn > 0.0 {
            let dot: f64 = d
                .get(t.row)
                .map_or(0.0, |r| r.iter().zip(&t.score).map(|(x, y)| x * y).sum());
            let cos = (t.advantage * dot / vn).clamp(-1.0, 1.0);
            min_cos = min_cos.min(cos);
        }
    }
    let mut alpha = [None; 8];
    for (a, (sum, n)) in alpha.iter_mut().zip(abs_adv) {
        if n > 0 {
            *a = Some((sum / n as f64).abs() / a_max);
        }
    }
    let eta_raw = 1.0 - min_cos;
    Ok(DirectionStability {
        d_star: d,
        eta: eta_raw.clamp(0.0, 1.0),
        eta_raw,
        alpha,
        beta: score_norm_sum / tokens.len() as f64 / g_max,
        a_max,
        g_max,
    })
}

/// Empirical group gradients `g^(j) = Σ_{t ∈ j} w_t · Â_t · score_t`.
pub fn group_gradients(tokens: &[TokenGradient]) -> [RowVector; 8] {
    let mut out: [RowVector; 8] = Default::default();
    for t in tokens {
        let c = t.weight * t.advantage;
        if c != 0.0 {
            out[t.label.index()].add_row(t.row, &t.score, c);
        }
    }
    out
}

/// Measured cosine and bound for one pair of groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCheck {
    pub first: GroupLabel,
    pub second: GroupLabel,
    pub cosine: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub eps: f64,
    pub kappa: f64,
    pub stability: DirectionStability,
    /// `‖g^(j)‖` per group.
    pub group_norms: [f64; 8],
    pub pairs: Vec<PairCheck>,
    /// Set when the measured deviation leaves the theorem's hypothesis
    /// (`η ≥ 1` before clamping).
    pub hypothesis_failed: bool,
}

impl ConsistencyReport {
    pub fn violations(&self) -> usize {
        self.pairs.iter().filter(|p| !p.satisfied).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TheoremCheck {
    /// Fewer than two groups carry a nonzero gradient.
    NotApplicable { nontrivial_groups: usize },
    Checked(ConsistencyReport),
}

/// Checks every pair of nonzero group gradients against the consistency
/// bound, with all constants measured from the same token set.
pub fn verify_theorem(tokens: &[TokenGradient], eps: f64) -> Result<TheoremCheck> {
    let k = kappa(eps)?;
    let grads = group_gradients(tokens);
    let group_norms: [f64; 8] = std::array::from_fn(|i| grads[i].norm());
    let live: Vec<GroupLabel> = GroupLabel::ALL
        .into_iter()
        .filter(|l| group_norms[l.index()] > 0.0)
        .collect();
    if live.len() < 2 {
        return Ok(TheoremCheck::NotApplicable {
            nontrivial_groups: live.len(),
        });
    }
    let stability = estimate_direction_stability(tokens)?;
    let mut pairs = Vec::new();
    for (i, &a) in live.iter().enumerate() {
        for &b in &live[i + 1..] {
            let cos = cosine(&grads[a.index()], &grads[b.index()]);
            let alpha = |l: GroupLabel| stability.alpha[l.index()].unwrap_or(0.0);
            let bound = consistency_bound(stability.eta, k, alpha(a), alpha(b), stability.beta);
            pairs.push(PairCheck {
                first: a,
                second: b,
                cosine: cos,
                bound,
                satisfied: cos >= bound - BOUND_SLACK,
            });
        }
    }
    Ok(TheoremCheck::Checked(ConsistencyReport {
        eps,
        kappa: k,
        hypothesis_failed: stability.eta_raw >= 1.0,
        stability,
        group_norms,
        pairs,
    }))
}

/// Entropy series extracted from a metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrace {
    pub steps: Vec<usize>,
    pub entropy: Vec<f64>,
    pub group_entropy: Vec<[Option<f64>; 8]>,
    pub detached_fraction: Vec<f64>,
    pub gap: Vec<f64>,
}

/// Header of [`EntropyTrace::write_csv`].
pub const ENTROPY_TRACE_COLUMNS: &[&str] = &[
    "step",
    "entropy_mean",
    "entropy_g1",
    "entropy_g2",
    "entropy_g3",
    "entropy_g4",
    "entropy_g5",
    "entropy_g6",
    "entropy_g7",
    "entropy_g8",
    "detached_fraction",
    "high_low_entropy_gap",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EntropyTrace {
    /// Terminal over initial mean entropy.
    pub fn terminal_ratio(&self) -> f64 {
        self.entropy[self.entropy.len() - 1] / self.entropy[0]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", ENTROPY_TRACE_COLUMNS.join(","))?;
        for i in 0..self.steps.len() {
            let groups: Vec<String> = self.group_entropy[i].iter().map(|g| cell(*g)).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                self.steps[i],
                self.entropy[i],
                groups.join(","),
                self.detached_fraction[i],
                self.gap[i]
            )?;
        }
        Ok(())
    }
}

/// Pulls the entropy series out of parsed metrics records.
pub fn entropy_dynamics(records: &[MetricsRecord]) -> Result<EntropyTrace> {
    if records.len() < 2 {
        return Err(Error::invalid(format!(
            "entropy dynamics need at least 2 steps, got {}",
            records.len()
        )));
    }
    let mut trace = EntropyTrace {
        steps: Vec::new(),
        entropy: Vec::new(),
        group_entropy: Vec::new(),
        detached_fraction: Vec::new(),
        gap: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        let need = |key: &str| {
            r.get(key).ok_or_else(|| {
                Error::invalid(format!("metrics record {} lacks {key}", i + 1))
            })
        };
        let step = r
            .step()
            .ok_or_else(|| Error::invalid(format!("metrics record {} lacks step", i + 1)))?;
        let entropy = need("entropy_mean")?;
        if !(entropy >= 0.0) {
            return Err(Error::invalid(format!(
                "metrics record {} has negative entropy",
                i + 1
            )));
        }
        trace.steps.push(step);
        trace.entropy.push(entropy);
        trace.group_entropy.push(std::array::from_fn(|g| {
            r.get(&format!("entropy_g{}", g + 1))
        }));
        trace.detached_fraction.push(need("detached_fraction")?);
        trace.gap.push(need("high_low_entropy_gap")?);
    }
    Ok(trace)
}

/// Mean-entropy series of several runs aligned by step; a run without a
/// record at some step contributes `None` there.
pub fn paired_series(traces: &[EntropyTrace]) -> Vec<(usize, Vec<Option<f64>>)> {
    let mut by_step: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for (k, t) in traces.iter().enumerate() {
        for (&s, &e) in t.steps.iter().zip(&t.entropy) {
            by_step.entry(s).or_insert_with(|| vec![None; traces.len()])[k] = Some(e);
        }
    }
    by_step.into_iter().collect()
}

/// CSV with a `step` column and one entropy column per named run.
pub fn write_paired_csv<W: Write>(
    mut w: W,
    names: &[String],
    traces: &[EntropyTrace],
) -> std::io::Result<()> {
    let header: Vec<String> = names.iter().map(|n| format!("entropy_{n}")).collect();
    writeln!(w, "step,{}", header.join(","))?;
    for (step, values) in paired_series(traces) {
        let cells: Vec<String> = values.into_iter().map(cell).collect();
        writeln!(w, "{step},{}", cells.join(","))?;
    }
    Ok(())
}

/// Difficulty × correctness stratum of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    HardCorrect,
    HardWrong,
    EasyCorrect,
    EasyWrong,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [
        Stratum::HardCorrect,
        Stratum::HardWrong,
        Stratum::EasyCorrect,
        Stratum::EasyWrong,
    ];

    pub fn of(label: GroupLabel) -> Self {
        match (label.is_hard(), label.is_correct()) {
            (true, true) => Stratum::HardCorrect,
            (true, false) => Stratum::HardWrong,
            (false, true) => Stratum::EasyCorrect,
            (false, false) => Stratum::EasyWrong,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stratum::HardCorrect => "hard_correct",
            Stratum::HardWrong => "hard_wrong",
            Stratum::EasyCorrect => "easy_correct",
            Stratum::EasyWrong => "easy_wrong",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplitCounts {
    pub count: usize,
    pub high: usize,
}

impl SplitCounts {
    pub fn high_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.high as f64 / self.count as f64)
    }
}

/// Emission statistics of one vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPattern {
    pub token: usize,
    pub overall: SplitCounts,
    pub mean_entropy: Option<f64>,
    /// Indexed like [`Stratum::ALL`].
    pub strata: [SplitCounts; 4],
}

impl TokenPattern {
    pub fn low_rate(&self) -> Option<f64> {
        self.overall.high_rate().map(|h| 1.0 - h)
    }
}

/// Per-token entropy statistics, ranked by mean entropy (highest first;
/// tokens never emitted come last).
pub fn entropy_pattern_stats(records: &[AuditRecord], vocab: usize) -> Result<Vec<TokenPattern>> {
    if records.is_empty() {
        return Err(Error::invalid("empty dump"));
    }
    let mut sums = vec![0.0; vocab];
    let mut out: Vec<TokenPattern> = (0..vocab)
        .map(|token| TokenPattern {
            token,
            overall: SplitCounts::default(),
            mean_entropy: None,
            strata: [SplitCounts::default(); 4],
        })
        .collect();
    for r in records {
        let p = out.get_mut(r.token).ok_or_else(|| {
            Error::invalid(format!("token {} outside vocabulary {vocab}", r.token))
        })?;
        let high = usize::from(r.label.is_high_entropy());
        let s = Stratum::ALL
            .iter()
            .position(|s| *s == Stratum::of(r.label))
            .expect("stratum");
        p.overall.count += 1;
        p.overall.high += high;
        p.strata[s].count += 1;
        p.strata[s].high += high;
        sums[r.token] += r.entropy;
    }
    for p in &mut out {
        if p.overall.count > 0 {
            p.mean_entropy = Some(sums[p.token] / p.overall.count as f64);
        }
    }
    out.sort_by(|a, b| match (a.mean_entropy, b.mean_entropy) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.token.cmp(&b.token)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.token.cmp(&b.token),
    });
    Ok(out)
}

/// Header of [`write_patterns_csv`].
pub fn pattern_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["rank", "token", "count", "mean_entropy", "high_rate", "low_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for s in Stratum::ALL {
        cols.push(format!("count_{}", s.name()));
        cols.push(format!("high_rate_{}", s.name()));
    }
    cols
}

pub fn write_patterns_csv<W: Write>(mut w: W, patterns: &[TokenPattern]) -> std::io::Result<()> {
    writeln!(w, "{}", pattern_columns().join(","))?;
    for (rank, p) in patterns.iter().enumerate() {
        let mut cells = vec![
            (rank + 1).to_string(),
            p.token.to_string(),
            p.overall.count.to_string(),
            cell(p.mean_entropy),
            cell(p.overall.high_rate()),
            cell(p.low_rate()),
        ];
        for s in &p.strata {
            cells.push(s.count.to_string());
            cells.push(cell(s.high_rate()));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Expected high-split share of a response of `n` tokens.
pub fn expected_high_share(fraction: f64, n: usize) -> f64 {
    (n - floor_count(1.0 - fraction, n)) as f64 / n as f64
}
