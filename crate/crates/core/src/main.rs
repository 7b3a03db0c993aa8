use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wdn_fair::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "wdn-fair", version, about = "Fairness-aware leak detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate all scenarios; writes dataset.csv and sensors.csv.
    Simulate(Common),
    /// Train the H-method per diameter; writes table1.csv and models.csv.
    Baseline(Common),
    /// Sweep the fairness hyperparameters; writes pareto.csv and SVG plots.
    Sweep(Common),
    /// Check the DI/EO identities; writes identities.csv.
    Identities(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

fn run(cli: Cli) -> wdn_fair::Result<()> {
    let (Command::Simulate(c) | Command::Baseline(c) | Command::Sweep(c) | Command::Identities(c)) = &cli.command;
    let mut cfg = ExperimentConfig::read(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    match &cli.command {
        Command::Simulate(_) => {
            experiment::run_simulate(&cfg, &c.out, c.jobs)?;
        }
        Command::Baseline(_) => {
            let report = experiment::run_baseline(&cfg, &c.out, c.jobs)?;
            print!("{}", experiment::table1_csv(&report));
        }
        Command::Sweep(_) => {
            let report = experiment::run_sweep(&cfg, &c.out, c.jobs)?;
            log::info!("{} sweep points", report.points.len());
        }
        Command::Identities(_) => {
            let checks = experiment::run_identity_suite(&cfg, &c.out, c.jobs)?;
            let failed = checks.iter().filter(|c| !c.pass()).count();
            println!("{} checks, {failed} failed", checks.len());
        }
    }
    println!("outputs written to {}", c.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
