//! `creditlab`: train, score, verify, sweep and analyze from a JSON config.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! verification suite fails.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use credit_core::experiment::{analyze_policy, load_policy, run_sweep, train_experiment, ExperimentConfig};
use credit_core::interop::score_stream;
use credit_core::par::Exec;
use credit_core::synth::TabularPolicy;
use credit_core::verify::{run_suite, Suite, VerifyConfig};
use credit_core::{EstimatorConfig, Variant};

#[derive(Parser)]
#[command(name = "creditlab", version, about = "Token-level credit assignment lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics CSVs.
    Train(RunArgs),
    /// Score a JSON-lines trajectory log.
    Score(ScoreArgs),
    /// Run a property suite.
    Verify(VerifyArgs),
    /// Train the Cartesian grid of the config's sweep axes.
    Sweep(RunArgs),
    /// Write residual, calibration and concentration tables for a policy.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct ExecArgs {
    /// Run seeds and Monte Carlo chunks on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as `a,b,c` or a half-open range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct ScoreArgs {
    input: PathBuf,
    output: PathBuf,
    /// Config whose `estimator` section is used; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Report and drop malformed lines instead of failing.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// identities, oracle_exactness, bias, variance, gradients, roundtrip or all.
    suite: Suite,
    /// Reduced sample sizes.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Policy table to analyse; defaults to the config's initial policy.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    trajectories: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    variant: Option<Variant>,
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().context("range start")?;
        let b: u64 = b.trim().parse().context("range end")?;
        (a..b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse::<u64>().with_context(|| format!("seed `{x}`")))
            .collect::<anyhow::Result<_>>()?
    };
    if seeds.is_empty() {
        bail!("seed list `{s}` is empty");
    }
    Ok(seeds)
}

fn load_config(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(s) = &args.seeds {
        cfg.trainer.seeds = parse_seeds(s)?;
    }
    if let Some(v) = args.variant {
        cfg.estimator.variant = v;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn cmd_train(args: &RunArgs) -> anyhow::Result<()> {
    let (cfg, out) = load_config(args)?;
    let outcome = train_experiment(&cfg, &out, args.exec.exec())?;
    for s in &outcome.summary {
        println!(
            "{} {} seed={} initial={:.4} final={:.4} greedy={:.4}",
            s.variant, s.oracle_mode, s.seed, s.initial_success, s.final_success, s.final_greedy_success
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> anyhow::Result<()> {
    let (cfg, out) = load_config(args)?;
    let rows = run_sweep(&cfg, &out, args.exec.exec())?;
    for r in &rows {
        let delta = r
            .delta_vs_baseline
            .map(|d| format!(" delta_vs_grpo={d:+.4}"))
            .unwrap_or_default();
        println!(
            "C={} alpha={} G={} {} mean_final={:.4}{delta}",
            r.evidence_clip, r.alpha, r.group_size, r.variant, r.mean_final_success
        );
    }
    println!("wrote {}", out.join("aggregate.csv").display());
    Ok(())
}

fn score_estimator(path: Option<&Path>) -> anyhow::Result<EstimatorConfig> {
    let Some(path) = path else {
        return Ok(EstimatorConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).context("config is not JSON")?;
    let est = match value.get("estimator") {
        Some(e) => serde_json::from_value(e.clone()).context("invalid `estimator` section")?,
        None => EstimatorConfig::default(),
    };
    est.validate()?;
    Ok(est)
}

fn cmd_score(args: &ScoreArgs) -> anyhow::Result<()> {
    let mut est = score_estimator(args.config.as_deref())?;
    if let Some(v) = args.variant {
        est.variant = v;
    }
    let input = File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let output =
        File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let report = score_stream(BufReader::new(input), BufWriter::new(output), &est, args.skip_bad)
        .with_context(|| format!("scoring {}", args.input.display()))?;
    for r in &report.rejected {
        eprintln!("skipped: {r}");
    }
    for g in &report.skipped_groups {
        eprintln!("unscored: {g}");
    }
    println!(
        "scored {} records in {} groups ({} lines rejected, {} groups unscored)",
        report.records,
        report.groups,
        report.rejected.len(),
        report.skipped_groups.len()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<bool> {
    let mut cfg = if args.quick {
        VerifyConfig::quick()
    } else {
        VerifyConfig::default()
    };
    cfg.seed = args.seed;
    cfg.exec = args.exec.exec();
    let reports = run_suite(args.suite, &cfg)?;
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    println!("{}", if ok { "verify: PASS" } else { "verify: FAIL" });
    Ok(ok)
}

fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(v) = args.variant {
        cfg.estimator.variant = v;
    }
    let policy = match &args.policy {
        Some(p) => load_policy(p).with_context(|| format!("loading {}", p.display()))?,
        None => TabularPolicy::uniform(&cfg.env, &cfg.policy),
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("analysis"));
    let s = analyze_policy(&cfg, &policy, args.trajectories, args.seed, &out)?;
    println!(
        "{} trajectories, residual mean={:.3e} p95={:.3e}, gini |A|={:.4} |log lambda|={:.4}",
        s.trajectories, s.residual.mean, s.residual.p95, s.adv_gini, s.ratio_gini
    );
    for b in &s.brier {
        println!(
            "brier f={:.2} exact={:.4} shift_up={:.4} shift_down={:.4} jitter={:.4}",
            b.fraction, b.exact, b.shift_up, b.shift_down, b.jitter
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|()| true),
        Command::Score(a) => cmd_score(a).map(|()| true),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a).map(|()| true),
        Command::Analyze(a) => cmd_analyze(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
