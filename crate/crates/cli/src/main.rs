use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use htpo::analysis::{
    entropy_dynamics, entropy_pattern_stats, verify_theorem, write_paired_csv, write_patterns_csv,
    TheoremCheck, TokenGradient,
};
use htpo::audit::{read_audit, AuditRecord, AuditWriter};
use htpo::config::{Profile, RunConfig};
use htpo::gradcheck::{check_objective, check_score};
use htpo::metrics::{read_metrics, MetricsWriter, StepMetrics};
use htpo::objectives::ClipConfig;
use htpo::policy::PolicyTable;
use htpo::seeding::{self, EVAL_PROMPT_STREAM, EVAL_STREAM};
use htpo::tasks::{load_prompt_set, save_prompt_set, AffineTask, LengthDistribution};
use htpo::trainer::{evaluate, TrainObserver, Trainer};

const EXIT_INVALID: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "htpo", version, about = "Token-group policy optimization on synthetic verifiable tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from: desk or llm
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override one key, e.g. --set trainer.seed=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let profile: Profile = self.profile.parse()?;
        Ok(RunConfig::resolve(profile, self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics.jsonl, policy.ckpt and config.resolved
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to trainer.output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append to an existing metrics.jsonl instead of truncating it
        #[arg(long)]
        append: bool,
        /// Also write the per-token audit dump to audit.jsonl
        #[arg(long)]
        audit: bool,
    },
    /// Print the mean reward of a checkpoint on a prompt set
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random evaluation prompt set
    MakePrompts {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value = "1-6")]
        lengths: String,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Finite-difference check of the score and of every objective branch
    CheckGradients {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        eps_low: f64,
        #[arg(long, default_value_t = 0.28)]
        eps_high: f64,
    },
    /// Check the inter-group consistency bound on every mini-batch of an audit dump
    CheckTheorem {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
    },
    /// Export entropy series from one or more metrics streams as CSV
    AnalyzeEntropy {
        /// Metrics file (repeat to compare runs step by step)
        #[arg(long, required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token entropy ranking and high/low split rates from an audit dump
    EntropyPatterns {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration
    DumpConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

struct RunObserver {
    metrics: MetricsWriter,
    audit: Option<AuditWriter>,
}

impl TrainObserver for RunObserver {
    fn wants_audit(&self) -> bool {
        self.audit.is_some()
    }

    fn on_token(&mut self, record: &AuditRecord) -> htpo::Result<()> {
        match &mut self.audit {
            Some(w) => w.write(record),
            None => Ok(()),
        }
    }

    fn on_step(&mut self, m: &StepMetrics) -> htpo::Result<()> {
        self.metrics.write(m)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(cfg: &ConfigArgs, seed: Option<u64>, out: Option<PathBuf>, append: bool, audit: bool) -> Result<u8> {
    let mut run = cfg.resolve()?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(o) = out {
        run.output_dir = o;
    }
    let dir = run.output_dir.clone();
    create_dir(&dir)?;
    let resolved = dir.join("config.resolved");
    fs::write(&resolved, run.echo()).with_context(|| format!("writing {}", resolved.display()))?;

    let metrics_path = dir.join("metrics.jsonl");
    let metrics = if append {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let audit = if audit {
        Some(AuditWriter::create(&dir.join("audit.jsonl"))?)
    } else {
        None
    };
    let mut observer = RunObserver { metrics, audit };
    let mut trainer = Trainer::new(run.train.clone())?;
    trainer.run(&mut observer)?;
    if let Some(w) = observer.audit.take() {
        w.finish()?;
    }
    let policy = trainer.into_policy();
    policy.save(&dir.join("policy.ckpt"))?;

    let task = run.train.task()?;
    let mut prompt_rng = seeding::stream(run.eval_seed, EVAL_PROMPT_STREAM);
    let prompts: Vec<_> = (0..run.eval_prompts)
        .map(|_| task.sample_prompt(&run.train.lengths, &mut prompt_rng))
        .collect();
    save_prompt_set(&dir.join("eval_prompts.txt"), &prompts)?;
    let mut rng = seeding::stream(run.eval_seed, EVAL_STREAM);
    let acc = evaluate(&policy, &task, &prompts, run.eval_samples, run.train.temperature, &mut rng)?;
    eprintln!(
        "trained {} steps ({}); eval accuracy {acc:.4}; outputs in {}",
        run.train.total_steps(),
        run.train.mode,
        dir.display()
    );
    Ok(0)
}

fn eval(policy: &Path, prompts: &Path, samples: usize, temperature: f64, seed: u64) -> Result<u8> {
    let policy = PolicyTable::load(policy)?;
    let task = AffineTask::new(policy.vocab())?;
    if policy.key_space() != &task.key_space() {
        bail!(htpo::Error::InvalidInput(
            "checkpoint is not an affine-chain policy".into()
        ));
    }
    let prompts = load_prompt_set(prompts, &task)?;
    let mut rng = seeding::stream(seed, EVAL_STREAM);
    let acc = evaluate(&policy, &task, &prompts, samples, temperature, &mut rng)?;
    println!("{acc}");
    Ok(0)
}

fn make_prompts(out: &Path, count: usize, vocab: usize, lengths: &str, seed: u64) -> Result<u8> {
    let task = AffineTask::new(vocab)?;
    let lengths: LengthDistribution = lengths.parse()?;
    let mut rng = seeding::stream(seed, EVAL_PROMPT_STREAM);
    let prompts: Vec<_> = (0..count).map(|_| task.sample_prompt(&lengths, &mut rng)).collect();
    save_prompt_set(out, &prompts)?;
    Ok(0)
}

fn check_gradients(trials: usize, step: f64, tolerance: f64, seed: u64, clip: ClipConfig) -> Result<u8> {
    clip.validate()?;
    let mut rng = seeding::stream(seed, 0);
    let score_err = check_score(trials, step, &mut rng)?;
    let (objective_err, cells) = check_objective(&clip, step)?;
    println!("score: {trials} triples, max relative error {score_err:e}");
    println!("objective: {cells} cells, max relative error {objective_err:e}");
    let worst = score_err.max(objective_err);
    if worst > tolerance {
        println!("FAIL: {worst:e} > tolerance {tolerance:e}");
        return Ok(EXIT_VIOLATION);
    }
    println!("ok (tolerance {tolerance:e})");
    Ok(0)
}

fn check_theorem(dump: &Path, eps: f64) -> Result<u8> {
    let records = read_audit(dump)?;
    let mut batches: std::collections::BTreeMap<(usize, usize), Vec<TokenGradient>> = Default::default();
    for r in &records {
        batches
            .entry((r.step, r.minibatch))
            .or_default()
            .push(TokenGradient::from(r));
    }
    let (mut checked, mut skipped, mut pairs, mut violations, mut hypothesis_failed) = (0, 0, 0, 0, 0);
    let mut min_margin = f64::INFINITY;
    for ((step, mb), tokens) in &batches {
        match verify_theorem(tokens, eps) {
            Ok(TheoremCheck::Checked(report)) => {
                checked += 1;
                pairs += report.pairs.len();
                hypothesis_failed += usize::from(report.hypothesis_failed);
                for p in &report.pairs {
                    min_margin = min_margin.min(p.cosine - p.bound);
                    if !p.satisfied {
                        violations += 1;
                        println!(
                            "violation: step {step} minibatch {mb} {}-{}: cos {} < bound {}",
                            p.first, p.second, p.cosine, p.bound
                        );
                    }
                }
            }
            Ok(TheoremCheck::NotApplicable { .. }) | Err(htpo::Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    println!(
        "mini-batches: {} checked, {skipped} not applicable; pairs: {pairs}; violations: {violations}; \
         hypothesis failed: {hypothesis_failed}; min cos-bound margin: {min_margin}",
        checked
    );
    Ok(if violations > 0 { EXIT_VIOLATION } else { 0 })
}

fn analyze_entropy(metrics: &[PathBuf], out: &Path) -> Result<u8> {
    let mut traces = Vec::new();
    for path in metrics {
        let trace = entropy_dynamics(&read_metrics(path)?)?;
        println!("{}: terminal/initial entropy ratio {}", path.display(), trace.terminal_ratio());
        traces.push(trace);
    }
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let w = BufWriter::new(file);
    if traces.len() == 1 {
        traces[0].write_csv(w)
    } else {
        let names: Vec<String> = (1..=traces.len()).map(|i| format!("run{i}")).collect();
        write_paired_csv(w, &names, &traces)
    }
    .with_context(|| format!("writing {}", out.display()))?;
    Ok(0)
}

fn entropy_patterns(dump: &Path, out: &Path) -> Result<u8> {
    let records = read_audit(dump)?;
    let vocab = records.first().map_or(0, |r| r.score.len());
    let patterns = entropy_pattern_stats(&records, vocab)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_patterns_csv(BufWriter::new(file), &patterns)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train {
            cfg,
            seed,
            out,
            append,
            audit,
        } => train(&cfg, seed, out, append, audit),
        Command::Eval {
            policy,
            prompts,
            samples,
            temperature,
            seed,
        } => eval(&policy, &prompts, samples, temperature, seed),
        Command::MakePrompts {
            out,
            count,
            vocab,
            lengths,
            seed,
        } => make_prompts(&out, count, vocab, &lengths, seed),
        Command::CheckGradients {
            trials,
            step,
            tolerance,
            seed,
            eps_low,
            eps_high,
        } => check_gradients(trials, step, tolerance, seed, ClipConfig { eps_low, eps_high }),
        Command::CheckTheorem { dump, eps } => check_theorem(&dump, eps),
        Command::AnalyzeEntropy { metrics, out } => analyze_entropy(&metrics, &out),
        Command::EntropyPatterns { dump, out } => entropy_patterns(&dump, &out),
        Command::DumpConfig { cfg } => {
            print!("{}", cfg.resolve()?.echo());
            Ok(0)
        }
    }
}

/// I/O failures exit 3; everything else that stops a command is bad input.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<htpo::Error>() {
            return match e {
                htpo::Error::Io { .. } => EXIT_IO,
                _ => EXIT_INVALID,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_INVALID
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
