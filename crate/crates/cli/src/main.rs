use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use useq_core::harness_cli::{load_config, run, write_outputs, Scenario};
use useq_core::parallel::{with_workers, Execution};
use useq_core::Error;

#[derive(Parser)]
#[command(name = "useq", version, about = "Sequential U-statistic limit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and the CSV files.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for replicate loops; 1 runs sequentially.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Condition checkers and exact identity batteries.
    Check(Common),
    /// Functional limit verification by simulation.
    VerifyFclt(Common),
    /// Random geometric graph motif counts.
    Rgg(Common),
    /// Two-sample and edge changepoint processes.
    Changepoint(Common),
    /// Diagonal-dominant kernels.
    Diag(Common),
    /// Product formula battery.
    Product(Common),
}

fn execute(expected: Scenario, args: &Common) -> anyhow::Result<bool> {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(Error::Config(list)) => bail!("invalid config {}:\n  {}", args.config.display(), list.join("\n  ")),
        Err(e) => return Err(e).with_context(|| format!("reading {}", args.config.display())),
    };
    if cfg.scenario != expected {
        bail!("config scenario {:?} belongs to subcommand `{}`", cfg.scenario, cfg.scenario.subcommand());
    }
    if args.workers == Some(0) {
        bail!("--workers must be positive");
    }
    let exec = if args.workers == Some(1) { Execution::Sequential } else { Execution::Parallel };
    let outcome = with_workers(args.workers, || run(&cfg, exec)).context("running scenario")?;
    write_outputs(&outcome, &args.out).with_context(|| format!("writing outputs to {}", args.out.display()))?;
    let mut stdout = std::io::stdout().lock();
    for g in &outcome.artifacts.gates {
        let _ = writeln!(stdout, "{} {} = {:.6e} ({})", if g.pass { "PASS" } else { "FAIL" }, g.id, g.value, g.threshold);
    }
    let _ = writeln!(stdout, "config_hash {}", outcome.config_hash);
    Ok(outcome.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, args) = match &cli.command {
        Command::Check(a) => (Scenario::ConditionCheck, a),
        Command::VerifyFclt(a) => (Scenario::FcltVerify, a),
        Command::Rgg(a) => (Scenario::Rgg, a),
        Command::Changepoint(a) => (Scenario::Changepoint, a),
        Command::Diag(a) => (Scenario::DiagDominant, a),
        Command::Product(a) => (Scenario::ProductVerify, a),
    };
    match execute(scenario, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
