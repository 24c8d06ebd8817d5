//! Group rollouts under a frozen snapshot: rewards, difficulty, group-relative
//! advantages, and the dynamic-sampling filter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grouping::GroupLabel;
use crate::policy::{entropy_of_log_probs, sample_index, softmax, ContextKey, PolicyTable};
use crate::tasks::{AffineTask, TaskPrompt};

/// Per-token training unit. Everything except `label`/`detached` is filled at
/// rollout time and stays frozen for the rest of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub token: usize,
    /// 1-based position in the response.
    pub position: usize,
    pub key: ContextKey,
    pub old_log_prob: f64,
    /// Entropy of the snapshot's distribution at this token's context, nats.
    pub entropy: f64,
    pub advantage: f64,
    pub label: Option<GroupLabel>,
    pub detached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<TokenRecord>,
    pub correct: bool,
    pub reward: f64,
    /// Entropy threshold of the ρ1 lowest-entropy set (−∞ when it is empty).
    pub tau_low: f64,
    /// Entropy threshold of the ρ2 highest-entropy set (+∞ when it is empty).
    pub tau_high: f64,
}

impl Response {
    pub fn sequence(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.token).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    /// Index of the prompt within its step, for dumps.
    pub prompt_id: usize,
    pub prompt: TaskPrompt,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub difficulty: f64,
    pub kept: bool,
}

impl RolloutGroup {
    pub fn num_tokens(&self) -> usize {
        self.responses.iter().map(|r| r.tokens.len()).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.responses.iter().flat_map(|r| r.tokens.iter())
    }

    /// True when every response got the same reward.
    pub fn is_uniform(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageSpec {
    pub normalize_by_std: bool,
    pub std_floor: f64,
}

impl Default for AdvantageSpec {
    fn default() -> Self {
        Self {
            normalize_by_std: true,
            std_floor: 1e-6,
        }
    }
}

impl AdvantageSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std_floor > 0.0) {
            return Err(Error::invalid(format!(
                "std_floor must be positive, got {}",
                self.std_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DifficultyClass {
    Hard,
    Easy,
}

/// Samples `g` responses of length `prompt.len` under `snapshot`.
pub fn rollout_group<R: Rng + ?Sized>(
    snapshot: &PolicyTable,
    task: &AffineTask,
    prompt: TaskPrompt,
    g: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(Error::invalid(format!("group size {g} < 2")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    task.validate(&prompt)?;
    let mut responses = Vec::with_capacity(g);
    for _ in 0..g {
        let mut prev = prompt.s;
        let mut tokens = Vec::with_capacity(prompt.len);
        for position in 1..=prompt.len {
            let key = task.context_key(&prompt, prev);
            let log_probs = snapshot.log_probs(key)?;
            let token = if temperature == 1.0 {
                let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
                sample_index(&probs, rng.gen::<f64>())
            } else {
                let scaled: Vec<f64> = snapshot.row(key)?.iter().map(|x| x / temperature).collect();
                sample_index(&softmax(&scaled), rng.gen::<f64>())
            };
            tokens.push(TokenRecord {
                token,
                position,
                key,
                old_log_prob: log_probs[token],
                entropy: entropy_of_log_probs(&log_probs),
                advantage: 0.0,
                label: None,
                detached: false,
            });
            prev = token;
        }
        let seq: Vec<usize> = tokens.iter().map(|t| t.token).collect();
        let verdict = task.verify(&prompt, &seq);
        responses.push(Response {
            tokens,
            correct: verdict.correct,
            reward: verdict.reward,
            tau_low: f64::NEG_INFINITY,
            tau_high: f64::INFINITY,
        });
    }
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
    let mut group = RolloutGroup {
        prompt_id: 0,
        prompt,
        responses,
        rewards,
        difficulty: 0.0,
        kept: false,
    };
    group.difficulty = difficulty(&group);
    Ok(group)
}

/// Failure rate over the group's responses: `1 − (#correct)/G`.
pub fn difficulty(group: &RolloutGroup) -> f64 {
    let correct = group.responses.iter().filter(|r| r.correct).count();
    1.0 - correct as f64 / group.responses.len() as f64
}

/// Hard iff `d > tau_diff`; the boundary is easy.
pub fn classify_difficulty(d: f64, tau_diff: f64) -> DifficultyClass {
    if d > tau_diff {
        DifficultyClass::Hard
    } else {
        DifficultyClass::Easy
    }
}

/// Fills the outcome advantage on every token: the group z-score of the
/// reward (population std, floored), or plain mean-centering.
pub fn compute_advantages(group: &mut RolloutGroup, spec: &AdvantageSpec) {
    let n = group.rewards.len() as f64;
    let mean = group.rewards.iter().sum::<f64>() / n;
    let var = group.rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let scale = if spec.normalize_by_std {
        var.sqrt().max(spec.std_floor)
    } else {
        1.0
    };
    let uniform = group.is_uniform();
    for (resp, &r) in group.responses.iter_mut().zip(&group.rewards) {
        let adv = if uniform { 0.0 } else { (r - mean) / scale };
        for tok in &mut resp.tokens {
            tok.advantage = adv;
        }
    }
}

/// Drops groups whose rewards are all equal and marks the survivors kept.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups
        .into_iter()
        .filter_map(|mut g| {
            g.kept = !g.is_uniform();
            g.kept.then_some(g)
        })
        .collect()
}

/// Result of filling one training batch.
#[derive(Debug, Clone)]
pub struct FilledBatch {
    /// Exactly `quota` groups that will be trained on.
    pub kept: Vec<RolloutGroup>,
    /// Every group generated this step, kept or not.
    pub generated: Vec<RolloutGroup>,
    pub rounds: usize,
}

/// Calls `generate(round)` until `quota` groups survive the filter.
///
/// `max_rounds == 0` means no budget. Surplus kept groups from the last round
/// are discarded. With `filter == false` every generated group is kept.
pub fn fill_batch<F>(quota: usize, max_rounds: usize, filter: bool, mut generate: F) -> Result<FilledBatch>
where
    F: FnMut(usize) -> Result<Vec<RolloutGroup>>,
{
    let mut kept = Vec::with_capacity(quota);
    let mut generated = Vec::new();
    let mut rounds = 0;
    while kept.len() < quota {
        if max_rounds > 0 && rounds == max_rounds {
            return Err(Error::BudgetExhausted {
                rounds,
                kept: kept.len(),
                quota,
                partial: Box::new(kept),
            });
        }
        let batch = generate(rounds)?;
        rounds += 1;
        if batch.is_empty() {
            return Err(Error::invalid("generation round produced no groups"));
        }
        for mut g in batch {
            if filter {
                g.kept = !g.is_uniform();
            } else {
                g.kept = true;
            }
            if g.kept && kept.len() < quota {
                kept.push(g.clone());
            } else {
                g.kept = false;
            }
            generated.push(g);
        }
    }
    Ok(FilledBatch {
        kept,
        generated,
        rounds,
    })
}
