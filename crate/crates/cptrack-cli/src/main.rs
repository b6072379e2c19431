//! `cptrack` — command-line pipeline around the track-finding core.
//!
//! Stages connect through files: `simulate` writes events, `seed` turns
//! them into candidates, `train` fits a model and writes a checkpoint,
//! `track` reconstructs events with a checkpoint, `eval` scores candidates
//! or reconstructions against truth, and `bench` measures inference
//! throughput. Every stage takes the same `--config`/`--set`/`--seed`
//! options and embeds the fully resolved configuration in its output.
//!
//! Errors print one JSON line (`{"error": "..."}`) to stderr and exit
//! with status 1.

mod commands;
mod files;
mod runconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use crate::runconfig::RunConfig;

#[derive(Parser)]
#[command(
    name = "cptrack",
    version,
    about = "Recurrent track finding: simulate, seed, train, track, eval, bench"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the base seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate events and write them as a JSONL events file.
    Simulate {
        /// Number of events (defaults to assembly.n_events from the config).
        #[arg(long)]
        events: Option<usize>,
        /// Output events file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the directed seed search over an events file.
    Seed {
        /// Input events file.
        #[arg(long)]
        events: PathBuf,
        /// Output candidates file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from events plus candidates and write a checkpoint.
    Train {
        /// Input events file.
        #[arg(long)]
        events: PathBuf,
        /// Input candidates file.
        #[arg(long)]
        candidates: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss curve CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Reconstruct events with a trained checkpoint.
    Track {
        /// Input checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input events file.
        #[arg(long)]
        events: PathBuf,
        /// Output reconstruction file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on candidates, or a reconstruction against truth.
    Eval {
        /// Checkpoint to score (required with --candidates).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input events file (truth).
        #[arg(long)]
        events: PathBuf,
        /// Candidates file: evaluates the held-out mix per length.
        #[arg(long, conflicts_with = "recon")]
        candidates: Option<PathBuf>,
        /// Reconstruction file: evaluates track-level efficiency/ghost rate.
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Optional metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure inference throughput of a checkpoint.
    Bench {
        /// Input checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input events file.
        #[arg(long)]
        events: PathBuf,
        /// Input candidates file.
        #[arg(long)]
        candidates: PathBuf,
        /// Batch size for the batched timing runs.
        #[arg(long, default_value_t = 128)]
        batch: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.cmd {
        Cmd::Simulate { events, out } => {
            let n = events.unwrap_or(cfg.assembly.n_events);
            commands::cmd_simulate(&cfg, n, &out)
        }
        Cmd::Seed { events, out } => commands::cmd_seed(&cfg, &events, &out),
        Cmd::Train {
            events,
            candidates,
            out,
            history,
        } => commands::cmd_train(&cfg, &events, &candidates, &out, history.as_deref()),
        Cmd::Track {
            checkpoint,
            events,
            out,
        } => commands::cmd_track(&cfg, &checkpoint, &events, &out),
        Cmd::Eval {
            checkpoint,
            events,
            candidates,
            recon,
            out,
        } => match (candidates, recon) {
            (Some(cands), None) => {
                let Some(ckpt) = checkpoint else {
                    bail!("--candidates evaluation requires --checkpoint");
                };
                commands::cmd_eval_candidates(&cfg, &ckpt, &events, &cands, out.as_deref())
            }
            (None, Some(recon)) => commands::cmd_eval_recon(&cfg, &events, &recon, out.as_deref()),
            (None, None) => bail!("eval needs --candidates or --recon"),
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        },
        Cmd::Bench {
            checkpoint,
            events,
            candidates,
            batch,
        } => commands::cmd_bench(&cfg, &checkpoint, &events, &candidates, batch),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
