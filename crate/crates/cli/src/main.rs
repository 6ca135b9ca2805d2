//! `vividtoy`: generate data, train, distill, restore and evaluate.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vividtoy::Error;

#[derive(Parser, Debug)]
#[command(name = "vividtoy", version, about = "Desk-scale controllable video restoration")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for artifacts and logs; also the default input location.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Comma-separated `projector=on|off`, `connector=dual|mlp_only|ca_only`, `distill=on|off`.
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// Overrides the step count of the running stage.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Latent tile size for restoration or distillation.
    #[arg(long, global = true)]
    pub tile: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes the training and held-out toy datasets.
    GenData,
    /// Trains the backbone on clean clips.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Blends backbone re-syntheses into the training set.
    Distill {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains the control modules on top of a frozen backbone.
    Finetune {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Restores a directory of PPM frames.
    Restore {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Caption token ids, e.g. `1,4,12,20`.
        #[arg(long, value_delimiter = ',', required = true)]
        caption: Vec<u32>,
    },
    /// Degrades, restores and scores held-out clips, or scores two frame
    /// directories against each other.
    Eval {
        #[arg(long, conflicts_with_all = ["input", "reference"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate only the first `limit` clips.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, requires = "reference")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        reference: Option<PathBuf>,
    },
    /// Runs the gradient, round-trip and init-identity checks.
    Selfcheck,
}

/// Process exit code for a failed run.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Divergence(_) => 4,
        Error::Io { .. } | Error::Missing { .. } | Error::Corrupt { .. } | Error::Invalid { .. } | Error::Tensor(_) => {
            3
        }
    }
}

fn init_threads() -> Result<(), Error> {
    let threads = match std::env::var("VIVIDTOY_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config {
            field: "VIVIDTOY_THREADS".into(),
            msg: format!("expected a positive integer, got `{v}`"),
        })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config { field: "VIVIDTOY_THREADS".into(), msg: e.to_string() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(&cli));
    match result {
        Ok(ok) => ExitCode::from(if ok { 0 } else { 1 }),
        Err(e) => {
            eprintln!("vividtoy: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
