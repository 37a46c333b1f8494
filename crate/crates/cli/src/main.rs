mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, PipelineConfig};
use stages::{Status, Workspace};

/// Curate web-agent trajectories into supervised fine-tuning data.
#[derive(Parser)]
#[command(name = "trajcur", version)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, default_value = "pipeline.json")]
    config: PathBuf,
    /// Worker threads; 1 runs everything on the main thread.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Override the rollback pivot seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-play every query and keep the judged successes.
    Rollout,
    /// Splice loops out of the rollout pool and rewrite thoughts as lookahead plans.
    Reflect {
        /// Trajectory file to refine instead of the rollout pool.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Re-run every query with simulate-and-score action selection.
    Branch,
    /// Synthesize wrong-turn-and-recover variants of curated trajectories.
    Rollback {
        /// Base trajectories instead of the union of earlier stages.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Stack stage outputs into the cumulative datasets.
    Curate,
    /// Write a dataset as chat-format SFT records.
    Export {
        /// Dataset name under curate/ or a JSONL path.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Per-site success rates of a trajectory file.
    Eval {
        /// Dataset name under curate/ or a JSONL path; defaults to the rollout pool.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Token, length-change and cost summaries of the stage outputs.
    Stats,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.rollback.seed = seed;
    }
    let ws = Workspace::open(cfg, cli.out, cli.jobs)?;
    match cli.command {
        Command::Rollout => stages::rollout(&ws),
        Command::Reflect { dataset } => stages::reflect(&ws, dataset.as_deref()),
        Command::Branch => stages::branch(&ws),
        Command::Rollback { dataset } => stages::rollback(&ws, dataset.as_deref()),
        Command::Curate => stages::curate(&ws),
        Command::Export { dataset } => stages::export(&ws, dataset.as_deref()),
        Command::Eval { dataset } => stages::eval(&ws, dataset.as_deref()),
        Command::Stats => stages::stats(&ws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            eprintln!("finished with failures; see the stage's error report");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
