use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use agentrl_core::experiment::{self, ExperimentConfig, ExperimentError, METRICS_FILE, TRAJECTORIES_FILE};

#[derive(Parser)]
#[command(name = "agentrl", version, about = "Run and analyze agent RL training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file; defaults apply to omitted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a training run
    Run(Common),
    /// Recompute rewards and advantages from stored trajectories
    Replay {
        #[command(flatten)]
        common: Common,
        /// Trajectory spill; defaults to <out>/trajectories.jsonl
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Summarize a metrics stream
    Report {
        /// Metrics stream or run directory
        metrics: PathBuf,
    },
    /// Run once per value of one config key
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. cispo.learning_rate
        #[arg(long)]
        key: String,
        /// JSON list of values
        #[arg(long)]
        values: String,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<(), ExperimentError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(METRICS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let res = experiment::run_experiment(&cfg, c.out.as_deref())?;
            print_json(&experiment::yield_report(&res.records))
        }
        Command::Replay { common, trajectories } => {
            let cfg = load_config(&common)?;
            let path = trajectories
                .or_else(|| common.out.as_ref().map(|d| d.join(TRAJECTORIES_FILE)))
                .ok_or_else(|| ExperimentError::Config("replay needs --trajectories or --out".into()))?;
            let records = experiment::replay(&path, &cfg.reward)?;
            let mut out = std::io::stdout().lock();
            for r in &records {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            Ok(())
        }
        Command::Report { metrics } => {
            let records = experiment::read_metrics(&metrics_path(&metrics))?;
            if records.is_empty() {
                return Err(ExperimentError::Config("empty metrics stream".into()));
            }
            print_json(&experiment::yield_report(&records))
        }
        Command::Sweep { common, key, values } => {
            let cfg = load_config(&common)?;
            let values: Vec<serde_json::Value> =
                serde_json::from_str(&values).map_err(|e| ExperimentError::Config(format!("--values: {e}")))?;
            let rows = experiment::sweep(&cfg, &key, &values, common.out.as_deref())?;
            print_json(&rows)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
