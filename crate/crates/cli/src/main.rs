//! `kspace`: data generation, training, evaluation and inspection of the
//! k-space transformer.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime or numerical
//! failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kspace", version, about = "K-space transformer for undersampled MRI reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override the seed of the chosen command (data, mask or training).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory (defaults to `output.dir` of the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Continue training from a checkpoint.
    #[arg(long, global = true, value_name = "PATH")]
    pub resume: Option<PathBuf>,

    /// Floating-point precision of the computation.
    #[arg(long, global = true, value_enum, default_value = "32")]
    pub precision: Precision,

    /// Overwrite predicted k-space at sampled bins with the measurements.
    #[arg(long, global = true, value_enum)]
    pub data_consistency: Option<Switch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic phantoms, one file per sample, plus a manifest.
    GenData {
        /// Number of samples (defaults to the split's count in the config).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Write the configured mask and a PNG preview.
    GenMask,
    /// Train a model and write checkpoints plus a per-step loss CSV.
    Train {
        /// Dataset directory written by `gen-data` (default: generate in memory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out phantoms against the zero-filled baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Mask file (default: the checkpoint's training mask).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Skip the PNG outputs.
        #[arg(long)]
        no_images: bool,
    },
    /// Reconstruct one sample or full spectrogram file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Render encoder and HR-decoder attention maps for chosen sampled points.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Indices into the sampled point set, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        points: Vec<usize>,
        /// Encoder / HR decoder layer to visualize (default: last).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Attention cost sweeps: analytic counts, instrumented counts, wall time.
    Bench {
        /// Timed forward passes per configuration.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Small grids only.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
