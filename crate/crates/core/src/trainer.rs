//! The training loop: snapshot, rollout with dynamic sampling, grouping,
//! per-token objectives and mini-batch gradient ascent.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audit::AuditRecord;
use crate::error::{Error, Result};
use crate::grouping::{assign_groups, GroupLabel, GroupingConfig};
use crate::metrics::StepMetrics;
use crate::objectives::{
    clipped_objective, htpo_objective_parts, ClipConfig, ImportanceRatio, ObjectiveMode, Regime,
    SpecialGroups, TokenObjective,
};
use crate::policy::{sample_index, softmax, ContextKey, PolicyTable};
use crate::rollout::{
    classify_difficulty, compute_advantages, fill_batch, rollout_group, AdvantageSpec,
    DifficultyClass, RolloutGroup,
};
use crate::seeding::{self, seed_streams, PROMPT_STREAM, SHUFFLE_STREAM};
use crate::tasks::{AffineTask, LengthDistribution, TaskPrompt};

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub vocab: usize,
    pub lengths: LengthDistribution,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Prompt groups trained on per step.
    pub train_batch: usize,
    /// Prompts drawn per generation round.
    pub gen_batch: usize,
    /// Prompt groups' worth of responses per gradient update.
    pub mini_batch: usize,
    /// Responses per prompt.
    pub group_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
    pub workers: usize,
    /// Forces a single rollout worker so runs are bit-reproducible.
    pub strict: bool,
    /// Drop groups whose responses all share one reward.
    pub filter_groups: bool,
    /// Generation rounds allowed per step; 0 means unlimited.
    pub max_gen_rounds: usize,
    pub advantage: AdvantageSpec,
    pub grouping: GroupingConfig,
    pub clip: ClipConfig,
    pub mode: ObjectiveMode,
    /// Groups that use their specialised objective in HTPO mode.
    pub special: SpecialGroups,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            lengths: LengthDistribution::uniform(1, 6).expect("valid lengths"),
            iterations: 1,
            steps_per_iteration: 300,
            train_batch: 16,
            gen_batch: 32,
            mini_batch: 4,
            group_size: 8,
            learning_rate: 50.0,
            temperature: 1.0,
            seed: 0,
            workers: 1,
            strict: true,
            filter_groups: true,
            max_gen_rounds: 32,
            advantage: AdvantageSpec::default(),
            grouping: GroupingConfig::default(),
            clip: ClipConfig::default(),
            mode: ObjectiveMode::Htpo,
            special: SpecialGroups::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("train_batch", self.train_batch),
            ("gen_batch", self.gen_batch),
            ("mini_batch", self.mini_batch),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::invalid("vocab must be at least 2"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group size must be at least 2"));
        }
        if !self.train_batch.is_multiple_of(self.mini_batch) {
            return Err(Error::invalid(format!(
                "mini-batch {} does not divide train batch {}",
                self.mini_batch, self.train_batch
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.advantage.validate()?;
        self.grouping.validate()?;
        self.clip.validate()?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.iterations * self.steps_per_iteration
    }

    pub fn minibatches(&self) -> usize {
        self.train_batch / self.mini_batch
    }

    /// Clip range actually applied: GRPO uses `eps_low` on both sides.
    pub fn effective_clip(&self) -> ClipConfig {
        match self.mode {
            ObjectiveMode::Grpo => ClipConfig::symmetric(self.clip.eps_low),
            _ => self.clip,
        }
    }

    /// Grouping actually applied: baselines never detach tokens.
    pub fn effective_grouping(&self) -> GroupingConfig {
        match self.mode {
            ObjectiveMode::Htpo => self.grouping.clone(),
            _ => GroupingConfig {
                rho_low: 0.0,
                rho_high: 0.0,
                ..self.grouping.clone()
            },
        }
    }

    pub fn task(&self) -> Result<AffineTask> {
        AffineTask::new(self.vocab)
    }

    fn rollout_workers(&self) -> usize {
        if self.strict {
            1
        } else {
            self.workers
        }
    }
}

/// Receives per-step metrics and, when asked, per-token audit records.
pub trait TrainObserver {
    fn wants_audit(&self) -> bool {
        false
    }

    fn on_token(&mut self, _record: &AuditRecord) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// One token's contribution to a gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedToken {
    pub key: ContextKey,
    pub token: usize,
    pub weight: f64,
    pub advantage: f64,
    /// Response index within the step, for error reports.
    pub response: usize,
    pub position: usize,
}

/// Gradient ascent on the token-mean surrogate: each token adds
/// `lr · weight · Â · score / token_count` to its row. Returns the L2 norm of
/// the gradient (before scaling by `lr`).
pub fn update_step(
    policy: &mut PolicyTable,
    tokens: &[WeightedToken],
    token_count: usize,
    lr: f64,
) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::invalid("token count must be positive"));
    }
    let vocab = policy.vocab();
    let n = token_count as f64;
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in tokens {
        let non_finite = || Error::NonFiniteGradient {
            response: t.response,
            position: t.position,
            token: t.token,
        };
        let c = t.weight * t.advantage / n;
        if !c.is_finite() {
            return Err(non_finite());
        }
        if c == 0.0 {
            continue;
        }
        let probs = policy.probs(t.key)?;
        if t.token >= vocab {
            return Err(Error::invalid(format!("token {} out of vocabulary", t.token)));
        }
        let row = rows.entry(t.key.row()).or_insert_with(|| vec![0.0; vocab]);
        for (v, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
            let s = if v == t.token { 1.0 - p } else { -p };
            *g += c * s;
        }
        if row.iter().any(|g| !g.is_finite()) {
            return Err(non_finite());
        }
    }
    let norm = rows
        .values()
        .flat_map(|r| r.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let deltas: Vec<(ContextKey, Vec<f64>)> = rows
        .into_iter()
        .map(|(row, g)| (ContextKey::from_row(row), g.into_iter().map(|x| lr * x).collect()))
        .collect();
    policy.apply_row_deltas(&deltas)?;
    Ok(norm)
}

/// Objective of one token under the configured mode.
pub fn token_objective(
    mode: ObjectiveMode,
    label: Option<GroupLabel>,
    detached: bool,
    r: ImportanceRatio,
    advantage: f64,
    clip: &ClipConfig,
    special: SpecialGroups,
) -> Result<TokenObjective> {
    match mode {
        ObjectiveMode::Htpo => {
            let label =
                label.ok_or_else(|| Error::InvalidState("token has no group label".into()))?;
            htpo_objective_parts(label, detached, r, advantage, clip, special)
        }
        ObjectiveMode::Dapo | ObjectiveMode::Grpo => Ok(clipped_objective(r, advantage, clip)),
    }
}

/// Stateful training run.
pub struct Trainer {
    cfg: TrainConfig,
    task: AffineTask,
    policy: PolicyTable,
    prompt_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    workers: Vec<ChaCha8Rng>,
    step: usize,
    next_prompt_id: usize,
}

impl Trainer {
    /// Starts from the uniform policy.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let task = cfg.task()?;
        let policy = PolicyTable::uniform(cfg.vocab, task.key_space())?;
        Self::with_policy(cfg, policy)
    }

    pub fn with_policy(cfg: TrainConfig, policy: PolicyTable) -> Result<Self> {
        cfg.validate()?;
        let task = cfg.task()?;
        if policy.vocab() != cfg.vocab || policy.key_space() != &task.key_space() {
            return Err(Error::invalid("policy shape does not match the task"));
        }
        Ok(Self {
            prompt_rng: seeding::stream(cfg.seed, PROMPT_STREAM),
            shuffle_rng: seeding::stream(cfg.seed, SHUFFLE_STREAM),
            workers: seed_streams(cfg.seed, cfg.rollout_workers())?,
            cfg,
            task,
            policy,
            step: 0,
            next_prompt_id: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn into_policy(self) -> PolicyTable {
        self.policy
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Runs every remaining step.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.total_steps().saturating_sub(self.step));
        while !self.finished() {
            out.push(self.step(observer)?);
        }
        Ok(out)
    }

    fn generate(&mut self, snapshot: &PolicyTable) -> Result<Vec<RolloutGroup>> {
        let prompts: Vec<(usize, TaskPrompt)> = (0..self.cfg.gen_batch)
            .map(|_| {
                let id = self.next_prompt_id;
                self.next_prompt_id += 1;
                (id, self.task.sample_prompt(&self.cfg.lengths, &mut self.prompt_rng))
            })
            .collect();
        let (task, g, temp) = (&self.task, self.cfg.group_size, self.cfg.temperature);
        let run_chunk = |chunk: &[(usize, TaskPrompt)], rng: &mut ChaCha8Rng| {
            chunk
                .iter()
                .map(|&(id, p)| {
                    let mut group = rollout_group(snapshot, task, p, g, temp, rng)?;
                    group.prompt_id = id;
                    Ok(group)
                })
                .collect::<Result<Vec<_>>>()
        };
        if self.workers.len() == 1 {
            return run_chunk(&prompts, &mut self.workers[0]);
        }
        // contiguous chunks, one per worker: results do not depend on scheduling
        let chunk = prompts.len().div_ceil(self.workers.len());
        let results: Vec<Result<Vec<RolloutGroup>>> = std::thread::scope(|s| {
            let handles: Vec<_> = prompts
                .chunks(chunk)
                .zip(self.workers.iter_mut())
                .map(|(c, rng)| s.spawn(move || run_chunk(c, rng)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(prompts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// One full step: rollout, grouping, and one update per mini-batch.
    pub fn step(&mut self, observer: &mut dyn TrainObserver) -> Result<StepMetrics> {
        let step = self.step;
        let snapshot = self.policy.snapshot();
        let (quota, rounds, filter) = (
            self.cfg.train_batch,
            self.cfg.max_gen_rounds,
            self.cfg.filter_groups,
        );
        let filled = fill_batch(quota, rounds, filter, |_| self.generate(&snapshot))?;
        let mut batch = filled.kept;
        let grouping = self.cfg.effective_grouping();
        for group in &mut batch {
            compute_advantages(group, &self.cfg.advantage);
            assign_groups(group, &grouping)?;
        }
        let mut metrics = batch_metrics(step, &self.cfg, &batch, &filled.generated, filled.rounds);

        let mut order: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| (0..g.responses.len()).map(move |ri| (gi, ri)))
            .collect();
        order.shuffle(&mut self.shuffle_rng);
        let per_mini = order.len() / self.cfg.minibatches();
        let clip = self.cfg.effective_clip();
        let audit = observer.wants_audit();
        let mut regimes = [0usize; 6];
        let mut evaluated = 0usize;
        let mut surrogate = 0.0;
        let mut grad_norm = 0.0;
        let mut ratio_dev: f64 = 0.0;
        for (mb, chunk) in order.chunks(per_mini).enumerate() {
            let mut weighted = Vec::new();
            let mut value_sum = 0.0;
            let mut count = 0usize;
            for &(gi, ri) in chunk {
                let group = &batch[gi];
                let resp = &group.responses[ri];
                let response_index = gi * self.cfg.group_size + ri;
                for tok in &resp.tokens {
                    let log_probs = self.policy.log_probs(tok.key)?;
                    let r = ImportanceRatio::from_log_probs(log_probs[tok.token], tok.old_log_prob)?;
                    let obj = token_objective(
                        self.cfg.mode,
                        tok.label,
                        tok.detached,
                        r,
                        tok.advantage,
                        &clip,
                        self.cfg.special,
                    )?;
                    regimes[regime_index(obj.regime)] += 1;
                    ratio_dev = ratio_dev.max((r.value() - 1.0).abs());
                    value_sum += obj.value;
                    count += 1;
                    weighted.push(WeightedToken {
                        key: tok.key,
                        token: tok.token,
                        weight: obj.grad_weight,
                        advantage: tok.advantage,
                        response: response_index,
                        position: tok.position,
                    });
                    if audit {
                        let mut score: Vec<f64> = log_probs.iter().map(|lp| -lp.exp()).collect();
                        score[tok.token] += 1.0;
                        observer.on_token(&AuditRecord {
                            step,
                            minibatch: mb,
                            prompt_id: group.prompt_id,
                            response: ri,
                            position: tok.position,
                            token: tok.token,
                            row: tok.key.row(),
                            old_log_prob: tok.old_log_prob,
                            entropy: tok.entropy,
                            reward: resp.reward,
                            advantage: tok.advantage,
                            difficulty: group.difficulty,
                            label: tok.label.expect("labels assigned"),
                            detached: tok.detached,
                            tau_low: resp.tau_low.is_finite().then_some(resp.tau_low),
                            tau_high: resp.tau_high.is_finite().then_some(resp.tau_high),
                            ratio: r.value(),
                            value: obj.value,
                            weight: obj.grad_weight,
                            regime: obj.regime,
                            score,
                        })?;
                    }
                }
            }
            evaluated += count;
            if count == 0 {
                continue;
            }
            surrogate += value_sum / count as f64;
            grad_norm += update_step(&mut self.policy, &weighted, count, self.cfg.learning_rate)?;
        }
        let n_mini = self.cfg.minibatches() as f64;
        metrics.surrogate = surrogate / n_mini;
        metrics.grad_norm = grad_norm / n_mini;
        metrics.ratio_max_deviation = ratio_dev;
        if evaluated > 0 {
            for (f, c) in metrics.regime_fractions.iter_mut().zip(regimes) {
                *f = c as f64 / evaluated as f64;
            }
        }
        metrics.policy_version = self.policy.version();
        observer.on_step(&metrics)?;
        self.step += 1;
        Ok(metrics)
    }
}

fn regime_index(regime: Regime) -> usize {
    Regime::ALL.iter().position(|r| *r == regime).expect("known regime")
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Rollout-side metrics of a step; update-side fields are filled later.
fn batch_metrics(
    step: usize,
    cfg: &TrainConfig,
    batch: &[RolloutGroup],
    generated: &[RolloutGroup],
    rounds: usize,
) -> StepMetrics {
    let mut group_counts = [0usize; 8];
    let mut group_entropy_sum = [0.0f64; 8];
    let (mut detached_g1, mut detached_g6) = (0, 0);
    let (mut high_sum, mut high_n, mut low_sum, mut low_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut tokens, mut entropy_sum) = (0usize, 0.0);
    let (mut responses, mut reward_sum, mut correct) = (0usize, 0.0, 0usize);
    let mut hard = 0usize;
    for group in batch {
        if classify_difficulty(group.difficulty, cfg.grouping.tau_diff) == DifficultyClass::Hard {
            hard += 1;
        }
        for resp in &group.responses {
            responses += 1;
            reward_sum += resp.reward;
            correct += usize::from(resp.correct);
            for tok in &resp.tokens {
                tokens += 1;
                entropy_sum += tok.entropy;
                let Some(label) = tok.label else { continue };
                group_counts[label.index()] += 1;
                group_entropy_sum[label.index()] += tok.entropy;
                if label.is_high_entropy() {
                    high_sum += tok.entropy;
                    high_n += 1;
                } else {
                    low_sum += tok.entropy;
                    low_n += 1;
                }
                if tok.detached {
                    match label {
                        GroupLabel::G1 => detached_g1 += 1,
                        _ => detached_g6 += 1,
                    }
                }
            }
        }
    }
    let (mut gen_tokens, mut gen_entropy, mut gen_responses, mut gen_reward) = (0usize, 0.0, 0usize, 0.0);
    for group in generated {
        for resp in &group.responses {
            gen_responses += 1;
            gen_reward += resp.reward;
            for tok in &resp.tokens {
                gen_tokens += 1;
                gen_entropy += tok.entropy;
            }
        }
    }
    let mut group_entropy = [None; 8];
    for (i, e) in group_entropy.iter_mut().enumerate() {
        if group_counts[i] > 0 {
            *e = Some(group_entropy_sum[i] / group_counts[i] as f64);
        }
    }
    let gap = if high_n > 0 && low_n > 0 {
        high_sum / high_n as f64 - low_sum / low_n as f64
    } else {
        0.0
    };
    let steps = cfg.steps_per_iteration.max(1);
    StepMetrics {
        step,
        iteration: step / steps,
        policy_version: 0,
        reward_mean: mean(reward_sum, responses),
        reward_generated_mean: mean(gen_reward, gen_responses),
        correct_rate: mean(correct as f64, responses),
        response_length_mean: mean(tokens as f64, responses),
        entropy_mean: mean(gen_entropy, gen_tokens),
        entropy_batch_mean: mean(entropy_sum, tokens),
        groups_generated: generated.len(),
        groups_kept: batch.len(),
        gen_rounds: rounds,
        hard_fraction: mean(hard as f64, batch.len()),
        tokens,
        group_counts,
        detached_g1,
        detached_g6,
        group_entropy,
        high_low_entropy_gap: gap,
        regime_fractions: [0.0; 6],
        ratio_max_deviation: 0.0,
        surrogate: 0.0,
        grad_norm: 0.0,
    }
}

/// Final policy and the metrics of every step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyTable,
    pub metrics: Vec<StepMetrics>,
}

/// Trains from the uniform policy for `cfg.total_steps()` steps.
pub fn train(cfg: TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let metrics = trainer.run(observer)?;
    Ok(TrainOutcome {
        policy: trainer.into_policy(),
        metrics,
    })
}

/// Mean reward of `samples` sampled responses per prompt.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &PolicyTable,
    task: &AffineTask,
    prompts: &[TaskPrompt],
    samples: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation prompt set is empty"));
    }
    if samples == 0 {
        return Err(Error::invalid("evaluation needs at least one sample per prompt"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut total = 0.0;
    for p in prompts {
        task.validate(p)?;
        for _ in 0..samples {
            let mut prev = p.s;
            let mut seq = Vec::with_capacity(p.len);
            for _ in 0..p.len {
                let key = task.context_key(p, prev);
                let row = policy.row(key)?;
                let probs = if temperature == 1.0 {
                    softmax(row)
                } else {
                    softmax(&row.iter().map(|x| x / temperature).collect::<Vec<_>>())
                };
                prev = sample_index(&probs, rng.gen::<f64>());
                seq.push(prev);
            }
            total += task.verify(p, &seq).reward;
        }
    }
    Ok(total / (prompts.len() * samples) as f64)
}

/// Expected accuracy of the uniform policy: `E_L[V^-L]`.
pub fn uniform_accuracy(vocab: usize, lengths: &LengthDistribution) -> f64 {
    lengths
        .lengths()
        .iter()
        .zip(lengths.probabilities())
        .map(|(&l, p)| p * (vocab as f64).powi(-(l as i32)))
        .sum()
}
