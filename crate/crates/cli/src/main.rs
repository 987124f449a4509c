use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use formation::config::ExperimentConfig;
use formation::pipeline::{self, PolicyRef};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "formation", version, about = "Leader-follower swimming: imitation learning from flow sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration; built-in defaults fill anything it omits.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel rollouts (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output directory (overrides the configuration).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training epochs per stage.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Rollouts collected (or evaluated) by this command.
    #[arg(long, value_name = "N")]
    rollouts: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect expert demonstrations and train the behaviour-cloning policy.
    Bc(Common),
    /// Run DAgger iterations on top of an existing behaviour-cloning run.
    Dagger {
        #[command(flatten)]
        common: Common,
        /// Total number of DAgger iterations the run should reach.
        #[arg(long, value_name = "K")]
        iterations: Option<usize>,
    },
    /// Evaluate policies on a shared set of rollout seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `expert`, `none`, checkpoint files, or checkpoint names in <out>/checkpoints.
        #[arg(required = true, value_name = "POLICY")]
        policies: Vec<String>,
    },
    /// Static follower grid: sensed pressure versus leader placement.
    FixedFollower(Common),
    /// Print the effective configuration as TOML.
    PrintConfig(Common),
}

fn load_config(common: &Common, command: &Command) -> formation::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(n) = common.rollouts {
        match command {
            Command::Bc(_) => cfg.counts.bc_rollouts = n,
            Command::Dagger { .. } => cfg.counts.dagger_rollouts = n,
            Command::Eval { .. } => cfg.counts.eval_rollouts = n,
            Command::FixedFollower(_) | Command::PrintConfig(_) => {}
        }
    }
    if let Command::Dagger { iterations: Some(k), .. } = command {
        cfg.counts.dagger_iterations = *k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command) -> anyhow::Result<()> {
    let common = match command {
        Command::Bc(c) | Command::FixedFollower(c) | Command::PrintConfig(c) => c,
        Command::Dagger { common, .. } | Command::Eval { common, .. } => common,
    };
    let cfg = load_config(common, command)?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(formation::Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let out = cfg.output_dir.clone();
    match command {
        Command::PrintConfig(_) => print!("{}", cfg.to_toml()),
        Command::Bc(_) => {
            let r = pipeline::cmd_bc(&cfg, &out)?;
            println!(
                "behaviour cloning: {} rollouts, best epoch {} (val loss {:.6}), checkpoint {}",
                r.rollouts.len(),
                r.outcome.best_epoch,
                r.outcome.best_val_loss(),
                r.checkpoint.display()
            );
        }
        Command::Dagger { .. } => {
            let rs = pipeline::cmd_dagger(&cfg, &out)?;
            if rs.is_empty() {
                println!("all {} DAgger iterations already complete", cfg.counts.dagger_iterations);
            }
            for r in rs {
                let rewards: Vec<f64> = r.metrics.iter().map(|m| m.cumulative_reward).collect();
                let median = formation::eval::Quartiles::of(&rewards).map(|q| q.median).unwrap_or(f64::NAN);
                println!(
                    "iteration {}: {} rollouts (median reward {:.1}), best epoch {} (val loss {:.6})",
                    r.iteration,
                    r.rollouts.len(),
                    median,
                    r.outcome.best_epoch,
                    r.outcome.best_val_loss()
                );
            }
        }
        Command::Eval { policies, .. } => {
            let refs = policies
                .iter()
                .map(|p| PolicyRef::parse(p, &out))
                .collect::<formation::Result<Vec<_>>>()?;
            let r = pipeline::cmd_eval(&cfg, &out, &refs)?;
            print!("{}", r.table);
        }
        Command::FixedFollower(_) => {
            let r = pipeline::cmd_fixed_follower(&cfg, &out)?;
            for c in &r.cells {
                println!(
                    "lateral {:>5} mm  longitudinal {:>5} mm  rms {:.4} Pa  onset {}",
                    c.lateral,
                    c.longitudinal,
                    c.rms,
                    c.onset_delay.map(|d| format!("{d:.2} s")).unwrap_or_else(|| "-".into())
                );
            }
            for (lat, lon) in &r.skipped {
                println!("lateral {lat:>5} mm  longitudinal {lon:>5} mm  skipped (bodies overlap)");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<formation::Error>().is_some_and(|e| e.is_usage());
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
