//! Command-line pipelines over the fewsum library.
//!
//! One binary, subcommands per pipeline stage. Every command resolves a
//! [`fewsum::config::RunConfig`] (TOML file + `--set` overrides), writes its
//! artifacts into `--out-dir`, and records a manifest sufficient to replay
//! the run bit-identically.
//!
//! Exit codes: 0 success, 1 usage, 2 data/config error, 3 numerical abort.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fewsum", version, about = "Few-shot summarization pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory all outputs are written into.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override a config key one-for-one, e.g. `--set seed=9` or
    /// `--set optimizer.total_steps=500`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase 1: multi-task pre-training; writes backbone, prefix bank,
    /// training log, train state and manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from a saved train state instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and save state) at this step instead of total_steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Phase 2: prefix-tune one held-out task on a sampled k-shot set.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Held-out task id (must be declared in the config).
        #[arg(long)]
        task: String,
        #[arg(long)]
        k: Option<usize>,
        /// Which of the sampled few-shot sets to tune on.
        #[arg(long, default_value_t = 0)]
        set_index: usize,
    },
    /// Generate summaries for a JSONL file of documents.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        /// Tuned prefix file (refused if it references another backbone).
        #[arg(long)]
        prefix: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against references with ROUGE-1/2/L.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Full benchmark sweep over the held-out tasks.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Sample the k-shot training sets for a task and write their ids.
    SampleShots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Re-execute a manifest and verify the outputs hash identically.
    Replay {
        /// Manifest written by a previous command.
        #[arg(long)]
        manifest: PathBuf,
        /// Fresh directory for the replayed artifacts.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                fewsum::Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
