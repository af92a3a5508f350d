//! `netfound`: one entry point for the whole pipeline.
//!
//! Every run writes its artifacts and a `manifest.toml` into a run
//! directory. The manifest records the fully resolved arguments, so
//! `netfound rerun --manifest <file> --run-dir <new>` repeats the run.

mod commands;
mod manifest;
mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use manifest::RunManifest;
pub use settings::Settings;

/// Exit status for each class of failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<netfound_model::ModelError> for CliError {
    fn from(e: netfound_model::ModelError) -> Self {
        use netfound_model::ModelError as E;
        match &e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_errors!(
    std::io::Error,
    netfound_core::dataset::DatasetError,
    netfound_core::pcap::PcapError,
    netfound_core::tokenizer::TokenizeError,
    netfound_core::flow::StatsError
);

const CONFIG_HELP: &str = "\
CONFIG FILE (--config, TOML):
  Top-level keys: seed, threads, toy, run-dir.
  Subcommand options go in a table named after the subcommand, with keys
  spelled like the long flags:

      seed = 7
      toy = true
      [pretrain]
      epochs = 5
      lr = 0.002
      batch-size = 32

  Flags override the file; the file overrides the built-in defaults.

EXIT STATUS:
  0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "netfound", version, about = "Network traffic foundation model pipeline", after_long_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every random choice [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-flow stages; model steps stay serial [default: 1].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Use the small model preset (hidden 64, 4 heads, 2 rounds) and its learning rates.
    #[arg(long, global = true)]
    pub toy: bool,
    /// TOML config file; see --help for the keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving the artifacts and manifest.toml [default: run].
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FilterArgs {
    /// Drop flows with fewer packets [default: 3].
    #[arg(long)]
    pub min_packets: Option<usize>,
    /// Drop flows in which no burst has more than two packets.
    #[arg(long)]
    pub burst_depth: bool,
    /// Largest same-direction gap inside a burst, microseconds [default: 10000].
    #[arg(long)]
    pub gap_us: Option<u64>,
    /// Bursts kept per flow [default: 12].
    #[arg(long)]
    pub bursts: Option<usize>,
    /// Packets kept per burst [default: 6].
    #[arg(long)]
    pub packets: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labelled synthetic capture (corpus.pcap, labels.csv).
    Generate {
        /// Flows per class [default: 1000].
        #[arg(long)]
        per_class: Option<usize>,
        /// Packet order in the file: interleaved or sequential [default: interleaved].
        #[arg(long)]
        emission: Option<String>,
        /// Window over which flow start times are spread, microseconds [default: 600000000].
        #[arg(long)]
        span_us: Option<u64>,
    },
    /// Capture plus optional labels to a token dataset (dataset.nfnd, stats.txt).
    Preprocess {
        #[arg(long)]
        pcap: Option<PathBuf>,
        /// Label CSV as written by `generate`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Burst composition medians of a capture (stats.txt).
    Stats {
        #[arg(long)]
        pcap: Option<PathBuf>,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Capture to an unlabelled token dataset.
    Tokenize {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output file name inside the run directory [default: flows.nfnd].
        #[arg(long)]
        out: Option<String>,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Masked-token pre-training (model.nfck, loss.csv, resumable state).
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// [default: 1]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: 2e-5, or 2e-3 with --toy]
        #[arg(long)]
        lr: Option<f64>,
        /// [default: 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Share of field tokens selected for corruption [default: 0.3].
        #[arg(long)]
        mask_rate: Option<f64>,
        /// Save a checkpoint every this many steps; 0 saves only at the end [default: 0].
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from a previous pre-training run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Model architecture TOML, overriding --toy.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Masked-token accuracy per header field (mlm.csv).
    EvaluateMlm {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// [default: 0.3]
        #[arg(long)]
        mask_rate: Option<f64>,
        /// [default: 64]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train a classification head (model.nfck, history.csv).
    Finetune {
        /// Labelled dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained checkpoint; random initialization when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of classes [default: largest label + 1].
        #[arg(long)]
        classes: Option<usize>,
        /// Upper bound on epochs [default: 30].
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: 1e-5, or 3e-4 with --toy]
        #[arg(long)]
        lr: Option<f64>,
        /// [default: 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Train only the head.
        #[arg(long)]
        freeze: bool,
        /// Share of training labels replaced by a wrong class [default: 0].
        #[arg(long)]
        noise_rate: Option<f64>,
        /// flow or burst [default: flow].
        #[arg(long)]
        level: Option<String>,
        /// Epochs without validation improvement before stopping [default: 2].
        #[arg(long)]
        patience: Option<usize>,
        /// [default: 0.1]
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Classification metrics of a fine-tuned model (metrics.csv).
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// flow or burst [default: flow].
        #[arg(long)]
        level: Option<String>,
        /// k for top-k accuracy [default: 1].
        #[arg(long)]
        top_k: Option<usize>,
        /// [default: 64]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Attention weights of one head for one flow (attention.csv).
    InspectAttention {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index of the flow in the dataset [default: 0].
        #[arg(long)]
        flow: Option<usize>,
        /// Encoder round [default: 0].
        #[arg(long)]
        round: Option<usize>,
        /// `flow`, or `burst:<slot>` [default: flow].
        #[arg(long)]
        layer: Option<String>,
        /// [default: 0]
        #[arg(long)]
        head: Option<usize>,
        /// Keys to list for the first query [default: 5].
        #[arg(long)]
        top: Option<usize>,
    },
    /// Repeat the run recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Preprocess { .. } => "preprocess",
            Command::Stats { .. } => "stats",
            Command::Tokenize { .. } => "tokenize",
            Command::Pretrain { .. } => "pretrain",
            Command::EvaluateMlm { .. } => "evaluate-mlm",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::InspectAttention { .. } => "inspect-attention",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Subcommands that may have a table in the config file.
pub const SECTIONS: [&str; 9] = [
    "generate",
    "preprocess",
    "stats",
    "tokenize",
    "pretrain",
    "evaluate-mlm",
    "finetune",
    "evaluate",
    "inspect-attention",
];

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Command::Rerun { manifest } = &cli.command {
        let m = RunManifest::load(manifest)?;
        let run_dir = cli
            .run_dir
            .clone()
            .ok_or_else(|| CliError::Usage("rerun needs --run-dir for the new artifacts".into()))?;
        let mut argv = vec!["netfound".to_string()];
        argv.extend(m.argv.iter().cloned());
        argv.push("--run-dir".into());
        argv.push(run_dir.display().to_string());
        let replay = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(format!("manifest arguments: {e}")))?;
        if matches!(replay.command, Command::Rerun { .. }) {
            return Err(CliError::Usage("a manifest cannot replay another rerun".into()));
        }
        return dispatch(replay);
    }
    commands::execute(cli)
}
