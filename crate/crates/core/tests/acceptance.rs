//! Acceptance suite. Each test prints one `[criterion N] PASS|FAIL` line and
//! then asserts, so a failing criterion is visible both in the summary and in
//! the captured output (`cargo test --test acceptance -- --nocapture`).

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use htpo::analysis::{eta_critical, kappa, verify_theorem, TheoremCheck, TokenGradient};
use htpo::audit::AuditRecord;
use htpo::config::{Profile, RunConfig};
use htpo::grouping::{
    assign_groups, detach_threshold_high, detach_threshold_low, entropy_split, GroupLabel,
    GroupingConfig,
};
use htpo::metrics::{MetricsWriter, StepMetrics};
use htpo::objectives::{
    htpo_objective_parts, unified_weight, ClipConfig, ImportanceRatio, ObjectiveMode,
    SpecialGroups, SurrogateTerm,
};
use htpo::policy::{ContextKey, KeySpace, PolicyTable};
use htpo::rollout::{
    classify_difficulty, difficulty, rollout_group, DifficultyClass, Response, RolloutGroup,
    TokenRecord,
};
use htpo::seeding;
use htpo::tasks::{AffineTask, TaskPrompt};
use htpo::trainer::{evaluate, train, TrainConfig, TrainObserver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, pass: bool, detail: &str) {
    println!("[criterion {n}] {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn desk_config() -> TrainConfig {
    RunConfig::resolve(Profile::Desk, None, &[]).unwrap().train
}

// ---------------------------------------------------------------- oracles

/// Log-softmax written out directly, with the max shift.
fn oracle_log_prob(logits: &[f64], token: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    logits[token] - m - z.ln()
}

/// `onehot(token) − softmax(logits)`.
fn oracle_score(logits: &[f64], token: usize) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter()
        .enumerate()
        .map(|(i, x)| f64::from(u8::from(i == token)) - x / z)
        .collect()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn rel_err(fd: &[f64], analytic: &[f64]) -> f64 {
    let scale = max_abs(analytic.iter().copied());
    let diff = max_abs(fd.iter().zip(analytic).map(|(a, b)| a - b));
    if scale == 0.0 {
        max_abs(fd.iter().copied())
    } else {
        diff / scale
    }
}

/// Gradient weight per group and ratio, written from the weight table with
/// asymmetric clip bounds.
fn oracle_weight(label: GroupLabel, detached: bool, r: f64, a: f64, eps_low: f64, eps_high: f64) -> f64 {
    let lo = 1.0 - eps_low;
    let hi = 1.0 + eps_high;
    let inside = if (lo..=hi).contains(&r) { r } else { 0.0 };
    match label {
        GroupLabel::G1 | GroupLabel::G6 if detached => 0.0,
        GroupLabel::G2 if a > 0.0 && r > hi => hi,
        GroupLabel::G2 if a > 0.0 && r < lo => {
            if 1.0 / r < hi {
                1.0 / r
            } else {
                hi
            }
        }
        GroupLabel::G4 | GroupLabel::G8 if a < 0.0 && r < lo => lo,
        _ => inside,
    }
}

// ------------------------------------------------------------ criterion 1

#[test]
fn criterion_01_score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..1000 {
        let vocab = rng.gen_range(2..=16);
        let rows = rng.gen_range(1..=5);
        let logits: Vec<f64> = (0..vocab * rows).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut policy = PolicyTable::from_logits(vocab, KeySpace::new(vec![rows]).unwrap(), logits).unwrap();
        let key = ContextKey::from_row(rng.gen_range(0..rows));
        let token = rng.gen_range(0..vocab);
        let analytic = policy.score(key, token).unwrap();
        let row = policy.row(key).unwrap().to_vec();
        let mut fd = vec![0.0; vocab];
        for v in 0..vocab {
            policy.row_mut(key).unwrap()[v] = row[v] + h;
            let up = policy.log_prob(key, token).unwrap();
            policy.row_mut(key).unwrap()[v] = row[v] - h;
            let down = policy.log_prob(key, token).unwrap();
            policy.row_mut(key).unwrap()[v] = row[v];
            fd[v] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&fd, &analytic));
        worst_oracle = worst_oracle.max(rel_err(&oracle_score(&row, token), &analytic));
        assert!((policy.log_prob(key, token).unwrap() - oracle_log_prob(&row, token)).abs() < 1e-12);
    }
    let pass = worst <= 1e-6 && worst_oracle <= 1e-12;
    report(
        1,
        pass,
        &format!("max rel err {worst:.3e} (tol 1e-6), closed form {worst_oracle:.3e}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 2

#[test]
fn criterion_02_stop_gradient_contract() {
    let clip = ClipConfig::default();
    let vocab = 5;
    let logits = vec![0.4, -0.3, 0.9, 0.0, -1.1];
    let policy = PolicyTable::from_logits(vocab, KeySpace::new(vec![1]).unwrap(), logits.clone()).unwrap();
    let key = ContextKey::from_row(0);
    let token = 1;
    let sg = oracle_log_prob(&logits, token);
    let score = oracle_score(&logits, token);
    let h = 1e-6;

    let mut worst: f64 = 0.0;
    let mut table_mismatch = 0;
    let mut cells = 0;
    let mut fixed_high_ok = true;
    let mut fixed_low_ok = true;
    for label in GroupLabel::ALL {
        let detach_flags: &[bool] = match label {
            GroupLabel::G1 | GroupLabel::G6 => &[false, true],
            _ => &[false],
        };
        for &detached in detach_flags {
            for a in [1.7, -0.9] {
                // G2 tokens only occur with A > 0, G4/G8 tokens only with A < 0
                let impossible = (label == GroupLabel::G2 && a < 0.0)
                    || (matches!(label, GroupLabel::G4 | GroupLabel::G8) && a > 0.0);
                for i in 10..=300 {
                    let r = i as f64 * 0.01;
                    let obj = htpo_objective_parts(
                        label,
                        detached,
                        ImportanceRatio::new(r).unwrap(),
                        a,
                        &clip,
                        SpecialGroups::ALL,
                    );
                    if impossible {
                        assert!(obj.is_err(), "{label} accepted A = {a}");
                        continue;
                    }
                    let obj = obj.unwrap();
                    let old = sg - r.ln();
                    let term = SurrogateTerm::new(&obj, a, old, sg);
                    let mut p = policy.clone();
                    let mut fd = vec![0.0; vocab];
                    for v in 0..vocab {
                        p.row_mut(key).unwrap()[v] = logits[v] + h;
                        let up = term.value_at(p.log_prob(key, token).unwrap());
                        p.row_mut(key).unwrap()[v] = logits[v] - h;
                        let down = term.value_at(p.log_prob(key, token).unwrap());
                        p.row_mut(key).unwrap()[v] = logits[v];
                        fd[v] = (up - down) / (2.0 * h);
                    }
                    let w = unified_weight(label, detached, r, a.signum(), &clip);
                    let expected = oracle_weight(label, detached, r, a, clip.eps_low, clip.eps_high);
                    if w != expected || obj.grad_weight != expected {
                        table_mismatch += 1;
                    }
                    let analytic: Vec<f64> = score.iter().map(|s| w * a * s).collect();
                    worst = worst.max(rel_err(&fd, &analytic));
                    if label == GroupLabel::G2 && r > 1.0 + clip.eps_high {
                        fixed_high_ok &= obj.grad_weight == 1.0 + clip.eps_high;
                    }
                    if matches!(label, GroupLabel::G4 | GroupLabel::G8) && r < 1.0 - clip.eps_low {
                        fixed_low_ok &= obj.grad_weight == 1.0 - clip.eps_low;
                    }
                    cells += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-6 && table_mismatch == 0 && fixed_high_ok && fixed_low_ok;
    report(
        2,
        pass,
        &format!(
            "{cells} cells, max rel err {worst:.3e} (tol 1e-6), table mismatches {table_mismatch}, \
             G2 fixed-high exact {fixed_high_ok}, G4/G8 fixed-low exact {fixed_low_ok}"
        ),
    );
    assert!(pass);
}

// -------------------------------------------------- shared full desk run

/// Streams a run's audit records, checking every weight and every
/// mini-batch's group gradients as they go.
struct AuditChecker {
    eps_low: f64,
    eps_high: f64,
    theorem_eps: f64,
    tokens: usize,
    zero_weights: usize,
    bad_weights: Vec<(usize, f64)>,
    current: Option<(usize, usize)>,
    batch: Vec<TokenGradient>,
    checked: usize,
    not_applicable: usize,
    hypothesis_failed: usize,
    violations: usize,
}

impl AuditChecker {
    fn new(clip: ClipConfig, theorem_eps: f64) -> Self {
        Self {
            eps_low: clip.eps_low,
            eps_high: clip.eps_high,
            theorem_eps,
            tokens: 0,
            zero_weights: 0,
            bad_weights: Vec::new(),
            current: None,
            batch: Vec::new(),
            checked: 0,
            not_applicable: 0,
            hypothesis_failed: 0,
            violations: 0,
        }
    }

    fn flush(&mut self) {
        if self.batch.is_empty() {
            return;
        }
        match verify_theorem(&self.batch, self.theorem_eps) {
            Ok(TheoremCheck::Checked(r)) => {
                self.checked += 1;
                self.violations += r.violations();
                self.hypothesis_failed += usize::from(r.hypothesis_failed);
            }
            Ok(TheoremCheck::NotApplicable { .. }) | Err(htpo::Error::Degenerate(_)) => {
                self.not_applicable += 1
            }
            Err(e) => panic!("{e}"),
        }
        self.batch.clear();
    }
}

impl TrainObserver for AuditChecker {
    fn wants_audit(&self) -> bool {
        true
    }

    fn on_token(&mut self, r: &AuditRecord) -> htpo::Result<()> {
        let at = (r.step, r.minibatch);
        if self.current != Some(at) {
            self.flush();
            self.current = Some(at);
        }
        self.tokens += 1;
        let lo = 1.0 - self.eps_low;
        let hi = 1.0 + self.eps_high;
        if r.weight == 0.0 {
            self.zero_weights += 1;
        } else if !(r.weight >= lo && r.weight <= hi) {
            self.bad_weights.push((r.step, r.weight));
        }
        self.batch.push(TokenGradient::from(r));
        Ok(())
    }

    fn on_step(&mut self, _: &StepMetrics) -> htpo::Result<()> {
        self.flush();
        Ok(())
    }
}

fn desk_run_audit() -> &'static AuditChecker {
    static RUN: OnceLock<AuditChecker> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = desk_config();
        let mut checker = AuditChecker::new(cfg.clip, cfg.clip.eps_low);
        train(cfg, &mut checker).unwrap();
        checker.flush();
        checker
    })
}

// ------------------------------------------------------------ criterion 3

#[test]
fn criterion_03_weight_bound_over_full_run() {
    let audit = desk_run_audit();
    let pass = audit.tokens > 0 && audit.bad_weights.is_empty();
    report(
        3,
        pass,
        &format!(
            "{} tokens audited, {} zero weights, {} outside [0.8, 1.28] (first: {:?})",
            audit.tokens,
            audit.zero_weights,
            audit.bad_weights.len(),
            audit.bad_weights.first()
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 4

#[test]
fn criterion_04_theorem_constants() {
    // (ε, κ, η_crit) as tabulated
    let table = [(0.1, 0.669, 0.21), (0.2, 0.444, 0.16), (0.3, 0.290, 0.11)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (eps, k_ref, eta_ref) in table {
        let k = kappa(eps).unwrap();
        let eta = eta_critical(k).unwrap();
        pass &= (k - k_ref).abs() <= 0.001 && (eta - eta_ref).abs() <= 0.005;
        detail.push(format!("eps {eps}: kappa {k:.4} eta_crit {eta:.4}"));
    }
    report(4, pass, &detail.join("; "));
    assert!(pass);
}

// ------------------------------------------------------------ criterion 5

#[test]
fn criterion_05_consistency_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut planted_violations = 0;
    let mut planted_checked = 0;
    for i in 0..1000 {
        let eps = [0.1, 0.2, 0.3][i % 3];
        let eta = rng.gen_range(0.0..=0.15);
        let pairs = rng.gen_range(4..=40);
        let dim = rng.gen_range(3..=16);
        let set = common::planted_set(&mut rng, eta, pairs, dim, (1.0 - eps, 1.0 + eps));
        if let TheoremCheck::Checked(r) = verify_theorem(&set, eps).unwrap() {
            planted_checked += 1;
            planted_violations += r.violations();
        }
    }

    let mut positivity_failures = 0;
    let mut positivity_pairs = 0;
    let mut positive_bounds = 0;
    for _ in 0..300 {
        let eta = rng.gen_range(0.0..=0.05);
        let set = common::planted_set(&mut rng, eta, 24, 8, (0.8, 1.2));
        if let TheoremCheck::Checked(r) = verify_theorem(&set, 0.2).unwrap() {
            for p in &r.pairs {
                positivity_pairs += 1;
                positivity_failures += usize::from(!(p.cosine > 0.0));
                positive_bounds += usize::from(p.bound > 0.0);
            }
        }
    }

    let desk = desk_run_audit();
    // baseline runs produce dumps too
    let mut baseline_violations = 0;
    let mut baseline_checked = 0;
    for mode in [ObjectiveMode::Dapo, ObjectiveMode::Grpo] {
        let cfg = TrainConfig {
            mode,
            steps_per_iteration: 60,
            ..desk_config()
        };
        let mut c = AuditChecker::new(cfg.effective_clip(), cfg.effective_clip().eps_low);
        train(cfg, &mut c).unwrap();
        c.flush();
        baseline_violations += c.violations;
        baseline_checked += c.checked;
    }

    let pass = planted_checked >= 990
        && planted_violations == 0
        && positivity_pairs > 0
        && positivity_failures == 0
        && desk.checked > 0
        && desk.violations == 0
        && baseline_violations == 0;
    report(
        5,
        pass,
        &format!(
            "planted: {planted_checked} sets, {planted_violations} violated pairs; \
             positivity: {positivity_failures}/{positivity_pairs} non-positive pairs \
             ({positive_bounds} with a positive bound); \
             desk HTPO: {} mini-batches checked ({} outside the deviation hypothesis), {} violations; \
             baselines: {baseline_checked} checked, {baseline_violations} violations",
            desk.checked, desk.hypothesis_failed, desk.violations
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 6

fn synthetic_group(entropies: &[Vec<f64>], correct: &[bool], difficulty: f64) -> RolloutGroup {
    let responses: Vec<Response> = entropies
        .iter()
        .zip(correct)
        .map(|(hs, &ok)| Response {
            tokens: hs
                .iter()
                .enumerate()
                .map(|(i, &h)| TokenRecord {
                    token: 0,
                    position: i + 1,
                    key: ContextKey::from_row(0),
                    old_log_prob: -1.0,
                    entropy: h,
                    advantage: if ok { 1.0 } else { -1.0 },
                    label: None,
                    detached: false,
                })
                .collect(),
            correct: ok,
            reward: f64::from(u8::from(ok)),
            tau_low: f64::NEG_INFINITY,
            tau_high: f64::INFINITY,
        })
        .collect();
    RolloutGroup {
        prompt_id: 0,
        prompt: TaskPrompt { a: 1, b: 0, s: 0, len: 1 },
        rewards: responses.iter().map(|r| r.reward).collect(),
        responses,
        difficulty,
        kept: true,
    }
}

#[test]
fn criterion_06_grouping_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let cfg = GroupingConfig::default();
    let mut sizes: Vec<usize> = (1..=400).collect();
    sizes.extend((0..200).map(|_| rng.gen_range(401..=10_000)));
    sizes.push(10_000);
    let mut count_errors = 0;
    let mut order_errors = 0;
    let mut detach_errors = 0;
    for &n in &sizes {
        // coarse quantisation forces many ties
        let levels = rng.gen_range(1..=50);
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.05).collect();
        let split = entropy_split(&h, cfg.high_entropy_fraction).unwrap();
        let n_low = 4 * n / 5;
        count_errors += usize::from(split.low.len() != n_low || split.high.len() != n - n_low);
        // every low token precedes every high token in (entropy, position) order
        let last_low = split.low.iter().map(|&i| (h[i], i)).max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first_high = split.high.iter().map(|&i| (h[i], i)).min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let (Some(l), Some(hh)) = (last_low, first_high) {
            order_errors += usize::from(!(l.0 < hh.0 || (l.0 == hh.0 && l.1 < hh.1)));
        }
        let low = detach_threshold_low(&h, cfg.rho_low);
        let high = detach_threshold_high(&h, cfg.rho_high);
        count_errors += usize::from(low.indices.len() != 6 * n / 1000);
        count_errors += usize::from(high.indices.len() != n / 50);
        for &i in &low.indices {
            order_errors += usize::from(h[i] > low.threshold);
        }
        for &i in &high.indices {
            order_errors += usize::from(h[i] < high.threshold);
        }

        let correct: Vec<bool> = (0..4).map(|k| k % 2 == 0).collect();
        let d = [0.25, 0.75][rng.gen_range(0..2)];
        let mut group = synthetic_group(&vec![h.clone(); 4], &correct, d);
        let wide = GroupingConfig {
            rho_low: 0.1,
            rho_high: 0.1,
            ..cfg
        };
        assign_groups(&mut group, &wide).unwrap();
        for resp in &group.responses {
            for t in &resp.tokens {
                if t.detached && !matches!(t.label, Some(GroupLabel::G1 | GroupLabel::G6)) {
                    detach_errors += 1;
                }
            }
        }
    }

    // truth table: (hard, correct, high) → label
    let table = [
        ((true, true, false), GroupLabel::G1),
        ((true, true, true), GroupLabel::G2),
        ((true, false, false), GroupLabel::G3),
        ((true, false, true), GroupLabel::G4),
        ((false, true, false), GroupLabel::G5),
        ((false, true, true), GroupLabel::G6),
        ((false, false, false), GroupLabel::G7),
        ((false, false, true), GroupLabel::G8),
    ];
    let mut table_errors = 0;
    // 5 tokens: the one at position 3 is the sole high-entropy token
    let h = vec![0.1, 0.2, 0.9, 0.3, 0.0];
    for ((hard, ok, high), expected) in table {
        let d = if hard { 0.625 } else { 0.5 };
        let mut group = synthetic_group(&[h.clone(), h.clone()], &[ok, !ok], d);
        assign_groups(&mut group, &cfg).unwrap();
        let pos = if high { 2 } else { 0 };
        table_errors += usize::from(group.responses[0].tokens[pos].label != Some(expected));
    }

    let pass = count_errors == 0 && order_errors == 0 && detach_errors == 0 && table_errors == 0;
    report(
        6,
        pass,
        &format!(
            "{} responses up to n=10000: count errors {count_errors}, order errors {order_errors}, \
             stray detaches {detach_errors}, truth-table errors {table_errors}",
            sizes.len()
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 7

#[derive(Default)]
struct Trace {
    values: Vec<(u64, u64)>,
}

impl TrainObserver for Trace {
    fn wants_audit(&self) -> bool {
        true
    }
    fn on_token(&mut self, r: &AuditRecord) -> htpo::Result<()> {
        self.values.push((r.value.to_bits(), r.weight.to_bits()));
        Ok(())
    }
}

#[test]
fn criterion_07_degenerates_to_baseline() {
    let base = TrainConfig {
        steps_per_iteration: 60,
        ..desk_config()
    };
    let htpo_cfg = TrainConfig {
        mode: ObjectiveMode::Htpo,
        special: SpecialGroups::NONE,
        grouping: GroupingConfig {
            rho_low: 0.0,
            rho_high: 0.0,
            ..base.grouping
        },
        ..base.clone()
    };
    let dapo_cfg = TrainConfig {
        mode: ObjectiveMode::Dapo,
        ..base
    };
    let mut ht = Trace::default();
    let mut dt = Trace::default();
    let a = train(htpo_cfg, &mut ht).unwrap();
    let b = train(dapo_cfg, &mut dt).unwrap();
    let same_policy = a
        .policy
        .logits()
        .iter()
        .zip(b.policy.logits())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let same_surrogate = a
        .metrics
        .iter()
        .zip(&b.metrics)
        .all(|(x, y)| x.surrogate.to_bits() == y.surrogate.to_bits());
    let same_tokens = ht.values == dt.values;
    let pass = same_policy && same_surrogate && same_tokens && a.metrics == b.metrics && !ht.values.is_empty();
    report(
        7,
        pass,
        &format!(
            "policy bit-identical {same_policy}, surrogate bit-identical {same_surrogate}, \
             {} per-token values/weights identical {same_tokens}",
            ht.values.len()
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 8

struct RunSummary {
    accuracy: f64,
    terminal_entropy: f64,
    seconds: f64,
}

/// Tail window for terminal entropy.
const TERMINAL_STEPS: usize = 10;

fn desk_eval(policy: &PolicyTable, run: &RunConfig) -> f64 {
    let task = run.train.task().unwrap();
    let mut prompt_rng = seeding::stream(run.eval_seed, seeding::EVAL_PROMPT_STREAM);
    let prompts: Vec<TaskPrompt> = (0..run.eval_prompts)
        .map(|_| task.sample_prompt(&run.train.lengths, &mut prompt_rng))
        .collect();
    let mut rng = seeding::stream(run.eval_seed, seeding::EVAL_STREAM);
    evaluate(policy, &task, &prompts, run.eval_samples, run.train.temperature, &mut rng).unwrap()
}

fn desk_run(mode: ObjectiveMode, seed: u64) -> RunSummary {
    let mut run = RunConfig::resolve(Profile::Desk, None, &[]).unwrap();
    run.train.mode = mode;
    run.train.seed = seed;
    let t = Instant::now();
    let out = train(run.train.clone(), &mut ()).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let tail = &out.metrics[out.metrics.len() - TERMINAL_STEPS..];
    RunSummary {
        accuracy: desk_eval(&out.policy, &run),
        terminal_entropy: tail.iter().map(|m| m.entropy_mean).sum::<f64>() / tail.len() as f64,
        seconds,
    }
}

#[test]
fn criterion_08_desk_training_efficacy() {
    let run = RunConfig::resolve(Profile::Desk, None, &[]).unwrap();
    assert_eq!(run.train.vocab, 16);
    assert_eq!(run.train.group_size, 8);
    assert_eq!(run.train.total_steps(), 300);
    assert_eq!(run.train.lengths.lengths(), &[1, 2, 3, 4, 5, 6]);
    let initial = desk_eval(
        &PolicyTable::uniform(16, run.train.task().unwrap().key_space()).unwrap(),
        &run,
    );

    let seeds = 0..5u64;
    let htpo: Vec<RunSummary> = seeds.clone().map(|s| desk_run(ObjectiveMode::Htpo, s)).collect();
    let grpo: Vec<RunSummary> = seeds.map(|s| desk_run(ObjectiveMode::Grpo, s)).collect();
    let mean = |v: &[RunSummary], f: fn(&RunSummary) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let h_acc = mean(&htpo, |r| r.accuracy);
    let g_acc = mean(&grpo, |r| r.accuracy);
    let h_ent = mean(&htpo, |r| r.terminal_entropy);
    let g_ent = mean(&grpo, |r| r.terminal_entropy);
    let slowest = htpo.iter().chain(&grpo).map(|r| r.seconds).fold(0.0, f64::max);

    let pass_a = h_acc >= g_acc - 0.01 && h_acc >= initial + 0.2;
    let pass_b = h_ent > g_ent;
    let pass_t = slowest <= 120.0;
    report(
        8,
        pass_a && pass_b && pass_t,
        &format!(
            "(a) {} HTPO acc {h_acc:.4} vs GRPO {g_acc:.4}, initial {initial:.4}; \
             (b) {} HTPO terminal entropy {h_ent:.4} vs GRPO {g_ent:.4}; \
             runtime {} slowest run {slowest:.1}s",
            if pass_a { "PASS" } else { "FAIL" },
            if pass_b { "PASS" } else { "FAIL" },
            if pass_t { "PASS" } else { "FAIL" },
        ),
    );
    assert!(pass_a, "accuracy criterion");
    assert!(pass_t, "runtime criterion");
    assert!(pass_b, "terminal entropy: HTPO {h_ent} <= GRPO {g_ent}");
}

// ------------------------------------------------------------ criterion 9

fn strict_run_files(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let cfg = TrainConfig {
        steps_per_iteration: 40,
        ..desk_config()
    };
    assert!(cfg.strict);
    let out = train(cfg, &mut ()).unwrap();
    let metrics = dir.join("metrics.jsonl");
    let mut w = MetricsWriter::create(&metrics).unwrap();
    for m in &out.metrics {
        w.write(m).unwrap();
    }
    drop(w);
    let ckpt = dir.join("policy.ckpt");
    out.policy.save(&ckpt).unwrap();
    (std::fs::read(metrics).unwrap(), std::fs::read(ckpt).unwrap())
}

#[test]
fn criterion_09_strict_runs_are_byte_identical() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (m1, c1) = strict_run_files(d1.path());
    let (m2, c2) = strict_run_files(d2.path());
    let pass = !m1.is_empty() && m1 == m2 && c1 == c2;
    report(
        9,
        pass,
        &format!(
            "metrics {} bytes identical {}, checkpoint {} bytes identical {}",
            m1.len(),
            m1 == m2,
            c1.len(),
            c1 == c2
        ),
    );
    assert!(pass);
}

// ----------------------------------------------------------- criterion 10

#[test]
fn criterion_10_difficulty_estimator() {
    let task = AffineTask::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA);
    let mut exact_errors = 0;
    let mut class_errors = 0;
    let mut groups = 0;
    for trial in 0..400 {
        let logits: Vec<f64> = (0..4 * task.key_space().rows()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let policy = PolicyTable::from_logits(4, task.key_space(), logits).unwrap();
        let prompt = TaskPrompt {
            a: rng.gen_range(0..4),
            b: rng.gen_range(0..4),
            s: rng.gen_range(0..4),
            len: rng.gen_range(1..=3),
        };
        let g = 2 + trial % 15;
        let group = rollout_group(&policy, &task, prompt, g, 1.0, &mut rng).unwrap();
        // oracle: re-verify every response against the target sequence
        let target = task.target_sequence(&prompt);
        let rewards: Vec<f64> = group
            .responses
            .iter()
            .map(|r| f64::from(u8::from(r.sequence() == target)))
            .collect();
        let mean_reward = rewards.iter().sum::<f64>() / g as f64;
        let expected = 1.0 - mean_reward;
        exact_errors += usize::from(group.difficulty != expected || difficulty(&group) != expected);
        for tau in [0.0, 0.5, 1.0] {
            let hard = expected > tau;
            let got = classify_difficulty(group.difficulty, tau) == DifficultyClass::Hard;
            class_errors += usize::from(hard != got);
        }
        groups += 1;
    }
    // boundary cases: d == τ is easy
    for (d, tau, hard) in [(0.0, 0.0, false), (0.5, 0.5, false), (1.0, 1.0, false), (0.125, 0.0, true), (1.0, 0.5, true), (0.5, 0.0, true)] {
        class_errors += usize::from((classify_difficulty(d, tau) == DifficultyClass::Hard) != hard);
    }
    let pass = exact_errors == 0 && class_errors == 0;
    report(
        10,
        pass,
        &format!("{groups} seeded groups: {exact_errors} inexact difficulties, {class_errors} misclassifications"),
    );
    assert!(pass);
}
