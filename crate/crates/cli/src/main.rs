//! `hiba` — train and evaluate the block-attention time-series forecaster.
//!
//! Exit codes: 0 success, 1 contract violation, 2 I/O or format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiba_core::error::Error;

#[derive(Parser)]
#[command(name = "hiba", version, about = "Block-attention time-series forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat TOML config file (keys documented in the README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one config key, e.g. `--set d_model=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output path (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Apply a named ablation: standard_attention, causal_intra,
    /// uniform_block_size[=B], head_set=H[,H…] (repeatable).
    #[arg(long = "ablate", value_name = "NAME", global = true)]
    ablations: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL + manifest with quality profiles).
    Synth {
        /// Number of series (overrides the `synth_count` config key).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a metrics log.
    Train {
        /// Corpus path: manifest `.json` or series `.jsonl`. Without it, a
        /// synthetic corpus is generated in memory from the synth settings.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Forecast each series in a JSONL file from a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input series (JSONL).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
    },
    /// Evaluate a checkpoint on a dataset: MASE/CRPS vs the seasonal naive.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset path: manifest `.json` or series `.jsonl`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Report attention score-pair counts and stack timings.
    Bench {
        /// Token count for the cost law (default 336).
        #[arg(long, default_value_t = 336)]
        n: usize,
        /// Model width for the timing comparison.
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Stack depth for the timing comparison.
        #[arg(long, default_value_t = 6)]
        layers: usize,
        /// Skip the wall-clock comparison.
        #[arg(long)]
        no_timing: bool,
    },
    /// Print checkpoint metadata (config, step, tensor table).
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { count } => commands::synth(&cli.common, count),
        Command::Train { data } => commands::train(&cli.common, data),
        Command::Forecast { checkpoint, input, horizon } => {
            commands::forecast(&cli.common, &checkpoint, &input, horizon)
        }
        Command::Eval { checkpoint, data } => commands::eval(&cli.common, &checkpoint, &data),
        Command::Bench { n, d, layers, no_timing } => {
            commands::bench(&cli.common, n, d, layers, !no_timing)
        }
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

/// Resolve settings from file + flags and log the full configuration.
fn resolve(common: &CommonArgs) -> hiba_core::Result<hiba_core::train::Settings> {
    let body = match &common.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?,
        ),
        None => None,
    };
    let sets: Vec<(String, String)> = common
        .sets
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::format(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<hiba_core::Result<_>>()?;
    let settings =
        hiba_core::train::resolve_settings(body.as_deref(), &sets, common.seed, &common.ablations)?;
    let json = serde_json::to_string(&settings)
        .map_err(|e| Error::format(format!("encoding resolved config: {e}")))?;
    eprintln!("resolved config: {json}");
    Ok(settings)
}
