use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fog_cli::config::{ExperimentConfig, Overrides};
use fog_cli::experiment;

#[derive(Parser)]
#[command(version, about = "Field-of-groves training, evaluation and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// key = value experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset CSV (label in the last column unless configured)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Total trees
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Trees per grove
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Comma-separated thresholds in (0,1)
    #[arg(long, global = true)]
    thresh: Option<String>,
    #[arg(long, global = true)]
    max_hops: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cost parameter file
    #[arg(long, global = true)]
    cost_config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a field of groves and write model.fog
    Train,
    /// Functional evaluation at each threshold
    Eval,
    /// Cycle-level simulation with energy and latency
    Simulate,
    /// Accuracy and EDP across grove topologies
    SweepTopology,
    /// Accuracy, hops and energy across thresholds
    SweepThreshold,
    /// RF / FoG_max / FoG_opt accuracy and energy table
    Report {
        /// Rebuild report.csv from a saved report_points.csv
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let c = cli.common;
    if let Command::Report { from: Some(points) } = &cli.command {
        let out = c.out.unwrap_or_else(|| PathBuf::from("out"));
        return experiment::cmd_report_from(points, &out);
    }
    let overrides = Overrides {
        dataset: c.dataset,
        n: c.n,
        k: c.k,
        thresh: c.thresh,
        max_hops: c.max_hops,
        seed: c.seed,
        cost_config: c.cost_config,
        out: c.out,
    };
    let cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    log::info!("config: {cfg:?}");
    match cli.command {
        Command::Train => experiment::cmd_train(&cfg),
        Command::Eval => experiment::cmd_eval(&cfg),
        Command::Simulate => experiment::cmd_simulate(&cfg),
        Command::SweepTopology => experiment::cmd_sweep_topology(&cfg),
        Command::SweepThreshold => experiment::cmd_sweep_threshold(&cfg),
        Command::Report { .. } => experiment::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
