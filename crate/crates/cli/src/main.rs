//! `ivmetric`: train, verify, benchmark, and query compact
//! involution/convolution embedding models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 verification failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunFlags;
use ivmetric_core::data::Split;
use ivmetric_core::error::{Error, Result};
use ivmetric_core::models::PresetName;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ivmetric", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset and write weights plus a history CSV
    Train {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Embedding-space metrics for a trained weight file
    Eval {
        #[command(flatten)]
        flags: RunFlags,
        /// Trained weight file
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated recall cutoffs
        #[arg(long, default_value = "1,5,10")]
        k: String,
    },
    /// Weight-parameter counts and serialized sizes per preset
    Params {
        /// Single preset to report (default: all)
        #[arg(long)]
        preset: Option<String>,
        /// Input shape as HxWxC (default: both benchmark shapes)
        #[arg(long)]
        input: Option<String>,
        /// Report every preset
        #[arg(long)]
        all: bool,
    },
    /// Train each listed preset under both losses and emit a CSV
    Bench {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated preset list; empty string for a header-only CSV
        #[arg(long, default_value = "cnn3a,cnn3b,inn2,inn3,inn4,hybrid1,hybrid2,hybrid3")]
        presets: String,
    },
    /// Finite-difference verification of every analytic gradient
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per check
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Similarity search: montage and CSV for selected query images
    Query {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated image indices in the query split
        #[arg(long)]
        indices: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Split the query images come from
        #[arg(long, default_value = "test")]
        split: String,
        /// Split the gallery is built from
        #[arg(long, default_value = "train")]
        gallery_split: String,
    },
    /// Export involution kernel-magnitude maps for selected images
    KernelMaps {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated image indices
        #[arg(long)]
        indices: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn parse_split(raw: &str) -> Result<Split> {
    match raw.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!("unknown split '{}'", other))),
    }
}

fn parse_shape(raw: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = raw
        .split('x')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid input shape '{}'", raw)))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::config(format!(
            "input shape must be HxWxC, got '{}'",
            raw
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { flags } => commands::train::run(&flags.resolve()?),
        Command::Eval { flags, weights, k } => {
            let cfg = flags.resolve()?;
            let ks = commands::parse_indices(&k)?;
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::config("recall cutoffs must be positive"));
            }
            commands::eval::run(&cfg, &weights, &ks)
        }
        Command::Params { preset, input, all } => {
            let shape = input.as_deref().map(parse_shape).transpose()?;
            commands::params::run(preset.as_deref(), shape, all)
        }
        Command::Bench { flags, presets } => {
            let cfg = flags.resolve()?;
            let list: Vec<PresetName> = presets
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PresetName::parse)
                .collect::<Result<_>>()?;
            commands::bench::run(&cfg, &list)
        }
        Command::Gradcheck { seed, seeds } => {
            if seeds == 0 {
                return Err(Error::config("gradcheck needs at least one seed"));
            }
            commands::gradcheck::run(seed, seeds)
        }
        Command::Query {
            flags,
            weights,
            indices,
            k,
            split,
            gallery_split,
        } => {
            let cfg = flags.resolve()?;
            let args = commands::query::QueryArgs {
                weights: &weights,
                indices: &indices,
                k,
                query_split: parse_split(&split)?,
                gallery_split: parse_split(&gallery_split)?,
            };
            commands::query::run(&cfg, &args)
        }
        Command::KernelMaps {
            flags,
            weights,
            indices,
            split,
        } => {
            let cfg = flags.resolve()?;
            commands::kernel_maps::run(&cfg, &weights, &indices, parse_split(&split)?)
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Format(_) | Error::Truncated(_) | Error::Pairing(_) | Error::Io(_) => 3,
        Error::Verification(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}
