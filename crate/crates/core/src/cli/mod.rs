//! Command-line front end.

mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data::{Script, Task};
use crate::error::Result;
use crate::verify::Scope;

pub use manifest::{RunManifest, RUN_MANIFEST};

const PRECEDENCE: &str = "Settings are resolved as: command-line flags, then the MSC_SEED \
environment variable (seed only), then the config file, then the preset named by each \
section's \"preset\" key (default \"desk\").";

#[derive(Debug, Parser)]
#[command(
    name = "msc-nmt",
    version,
    about = "Byte-level NMT with multi-scale contextualization"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a parallel corpus to id dumps and report byte-group statistics
    /// with a recommended k-series.
    Preprocess {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Output and run directory.
        #[arg(long)]
        out: PathBuf,
        /// Longest pair kept, in bytes including bos and eos.
        #[arg(long, default_value_t = 256)]
        max_len: usize,
    },
    /// Write a synthetic copy, reverse or cipher corpus.
    Generate {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        script: Script,
        #[arg(long)]
        size: usize,
        #[arg(long, env = "MSC_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
        #[arg(long, default_value = "runs/generate")]
        run_dir: PathBuf,
    },
    /// Train a model; writes checkpoints, the averaged final model and a
    /// JSON-lines log into the output directory.
    #[command(after_help = PRECEDENCE)]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output and run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "MSC_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Translate one segment per line.
    Translate {
        /// Checkpoint directory, e.g. <train out>/final.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file, or - for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Beam size; 1 is greedy search. Defaults to the model config.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value = "runs/translate")]
        run_dir: PathBuf,
    },
    /// Corpus BLEU of a checkpoint's translations of --src, or of --hyp.
    Eval {
        #[arg(long, conflicts_with = "hyp", requires = "src")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long, required_unless_present = "checkpoint")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value = "runs/eval")]
        run_dir: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "msc")]
        scope: Scope,
        /// First seed; seeds seed..seed+seeds are checked.
        #[arg(long, env = "MSC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value = "runs/gradcheck")]
        run_dir: PathBuf,
    },
    /// Train and score every (script, k-series variant) cell and print the
    /// grid as TSV.
    #[command(after_help = PRECEDENCE)]
    Scales {
        /// Optional config; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output and run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "MSC_SEED")]
        seed: Option<u64>,
    },
}

/// Runs a parsed command and returns its exit status.
pub fn run(cli: Cli) -> Result<i32> {
    commands::dispatch(cli.command)
}

fn exit_code(err: &crate::Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

/// Process entry point: 0 on success, 2 for configuration or input
/// validation errors, 3 for runtime and numeric failures.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
