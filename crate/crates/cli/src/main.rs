use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logo_core::demos::{collect_demonstrations, save_demos, train_behavior_policy, SuccessBand};
use logo_core::guidance::Projection;
use logo_core::harness::{
    emit_aggregate, evaluate_with, read_metrics, run, stream_rng, verify_theory, Algorithm, EvalMode, RunInputs,
    TrainConfig, EVAL_STREAM,
};
use logo_core::policy::{load_policy, save_policy};
use logo_core::tabular_oracle::CheckKind;
use logo_core::{LogoError, Result};

#[derive(Parser)]
#[command(name = "logo", version, about = "Sparse-reward policy optimization guided by a behavior policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (`[section]` headers, `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one entry, e.g. `--set trpo.delta=0.02`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LogoError::config(format!("--set expects SECTION.KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(a) = &self.algorithm {
            cfg.algorithm = Algorithm::parse(a)?;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured algorithm and write metrics, checkpoints and a curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run this many consecutive seeds and aggregate them.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Train a sub-optimal behavior policy with plain trust-region steps.
    TrainBehavior {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
        /// Stop once evaluation success falls inside [band_low, band_high].
        #[arg(long)]
        band_low: Option<f64>,
        #[arg(long, default_value_t = 0.8)]
        band_high: f64,
        #[arg(long, default_value_t = 1)]
        band_every: usize,
        #[arg(long, default_value_t = 100)]
        band_episodes: usize,
    },
    /// Roll out a policy and save its transitions as demonstrations.
    CollectDemos {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5000)]
        transitions: usize,
        /// Keep only these state coordinates, e.g. `0,1`.
        #[arg(long)]
        projection: Option<String>,
    },
    /// Evaluate a saved policy.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Sample actions instead of taking the most likely one.
        #[arg(long)]
        sample: bool,
    },
    /// Check the exact tabular identities and bounds on random instances.
    VerifyTheory {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        max_states: usize,
        #[arg(long, default_value_t = 3)]
        max_actions: usize,
    },
    /// Aggregate metrics files into mean/std columns and a curve.
    Plot {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "average return")]
        title: String,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn train(cfg: TrainConfig, seeds: u64) -> Result<()> {
    if seeds <= 1 {
        let out = run(&cfg, RunInputs::default())?;
        report(&cfg, &out.metrics);
        return Ok(());
    }
    let base = cfg.out_dir.clone();
    let mut runs = Vec::new();
    for s in 0..seeds {
        let mut c = cfg.clone();
        c.seed = cfg.seed + s;
        c.out_dir = base.as_ref().map(|d| d.join(format!("seed_{}", c.seed)));
        let out = run(&c, RunInputs::default())?;
        report(&c, &out.metrics);
        runs.push(out.metrics);
    }
    if let Some(dir) = base {
        emit_aggregate(&runs, cfg.algorithm.as_str(), &dir)?;
        println!("aggregate written to {}", dir.display());
    }
    Ok(())
}

fn report(cfg: &TrainConfig, metrics: &[logo_core::harness::MetricsRow]) {
    match metrics.last() {
        Some(r) => println!(
            "{} seed {}: {} iterations, {} env steps, avg return {:.4}, success {:.3}, delta_k {:.6}",
            cfg.algorithm.as_str(),
            cfg.seed,
            r.iteration,
            r.env_steps,
            r.avg_return,
            r.success_rate,
            r.delta_k
        ),
        None => println!("{} seed {}: no iterations run", cfg.algorithm.as_str(), cfg.seed),
    }
}

fn train_behavior(cfg: TrainConfig, output: &Path, band: Option<SuccessBand>) -> Result<()> {
    let result = train_behavior_policy(&cfg, band)?;
    save_policy(&result.policy, output)?;
    match result.success_rate {
        Some(s) => println!(
            "behavior policy after {} iterations, success {:.3}, saved to {}",
            result.iterations_run,
            s,
            output.display()
        ),
        None => println!("behavior policy after {} iterations saved to {}", result.iterations_run, output.display()),
    }
    Ok(())
}

fn collect(cfg: TrainConfig, policy: &Path, output: &Path, n: usize, projection: Option<&str>) -> Result<()> {
    let policy = load_policy(policy)?;
    let mut env = cfg.env.build()?;
    let projection = projection
        .map(|p| Projection::parse(p, env.state_dim()))
        .transpose()?;
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM - 1);
    let demos = collect_demonstrations(&policy, &mut env, &cfg.env.id(), n, projection, cfg.seed, &mut rng)?;
    save_demos(&demos, output)?;
    println!(
        "{} transitions (behavior return {:.4}) saved to {}",
        demos.len(),
        demos.metadata.behavior_return,
        output.display()
    );
    Ok(())
}

fn evaluate_cmd(cfg: TrainConfig, policy: &Path, episodes: usize, sample: bool) -> Result<()> {
    let policy = load_policy(policy)?;
    let mut env = cfg.env.build()?;
    let mode = if sample { EvalMode::Sample } else { EvalMode::Mode };
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let r = evaluate_with(&policy, &mut env, episodes, mode, &mut rng)?;
    println!(
        "episodes {episodes}, avg return {:.4}, success {:.3}, avg length {:.1}",
        r.avg_return, r.success_rate, r.avg_len
    );
    Ok(())
}

fn verify(instances: usize, seed: u64, max_states: usize, max_actions: usize) -> Result<()> {
    let summary = verify_theory(instances, seed, max_states, max_actions)?;
    println!("{:<30} {:<10} {:>14}", "check", "kind", "worst");
    for c in &summary.worst {
        let kind = match c.kind {
            CheckKind::Equality => "residual",
            CheckKind::Inequality => "slack",
        };
        println!("{:<30} {:<10} {:>14.6e}", c.name, kind, c.value);
    }
    println!("{} instances, {} skipped checks", summary.instances, summary.skipped);
    if summary.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        for (i, c) in &summary.failures {
            eprintln!("instance {i}: {} failed with {:e}", c.name, c.value);
        }
        Err(LogoError::TheoryCheck(format!("{} check failures", summary.failures.len())))
    }
}

fn plot(out_dir: &Path, title: &str, metrics: &[PathBuf]) -> Result<()> {
    let runs = metrics.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>>>()?;
    emit_aggregate(&runs, title, out_dir)?;
    println!("aggregate of {} runs written to {}", runs.len(), out_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, seeds } => train(cfg.load()?, seeds),
        Command::TrainBehavior {
            cfg,
            output,
            band_low,
            band_high,
            band_every,
            band_episodes,
        } => {
            let band = band_low.map(|low| SuccessBand {
                low,
                high: band_high,
                every: band_every,
                episodes: band_episodes,
            });
            train_behavior(cfg.load()?, &output, band)
        }
        Command::CollectDemos {
            cfg,
            policy,
            output,
            transitions,
            projection,
        } => collect(cfg.load()?, &policy, &output, transitions, projection.as_deref()),
        Command::Evaluate {
            cfg,
            policy,
            episodes,
            sample,
        } => evaluate_cmd(cfg.load()?, &policy, episodes, sample),
        Command::VerifyTheory {
            instances,
            seed,
            max_states,
            max_actions,
        } => verify(instances, seed, max_states, max_actions),
        Command::Plot { out_dir, title, metrics } => plot(&out_dir, &title, &metrics),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
