//! `topopack`: synthetic data, mask inspection, invariant checks, benchmarks
//! and the toy training stages.

mod check;
mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use topopack::Error;

/// Exit status for a failed property or runtime error.
const EXIT_FAILURE: u8 = 1;
/// Exit status for bad arguments.
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "topopack", version, about = "Topology-aware sparse attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Also write the JSON report to this path.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    /// Leave the timestamp out of JSON reports so identical runs match byte for byte.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug, Clone)]
pub struct LayoutArgs {
    /// Grid height in cells.
    #[arg(long = "H", default_value_t = 12)]
    height: usize,
    /// Grid width in cells.
    #[arg(long = "W", default_value_t = 12)]
    width: usize,
    /// Pack side.
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic feature grid (or a directory of them) in FGRID format.
    Synth {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Feature channels.
        #[arg(long = "D", default_value_t = 16)]
        dim: usize,
        /// Planted clusters.
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        /// Per-cell noise scale.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Number of grids; more than one writes `grid_NNNN.fgrid` files into `--out`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Describe the packed sequence layout of an H×W grid.
    Layout {
        #[command(flatten)]
        layout: LayoutArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Mask statistics: allowed entries against the dense count.
    Mask {
        #[command(flatten)]
        layout: LayoutArgs,
        /// Pack count; overrides the one implied by H, W and k.
        #[arg(long = "M")]
        packs: Option<u64>,
        /// Check the closed-form count by enumerating every entry.
        #[arg(long)]
        enumerate: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the invariant suite and report each property.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Time sparse against dense attention on a seeded workload.
    Bench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Head dimension.
        #[arg(long = "D", default_value_t = 16)]
        dim: usize,
        /// Skip the dense reference run.
        #[arg(long)]
        skip_dense: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run one training stage and write a checkpoint.
    Train(commands::TrainArgs),
    /// Propose three candidate regions and seed cells for a grid.
    Roi {
        /// FGRID input.
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Encode a grid and condense its summaries to a fixed number of tokens.
    Resample(commands::ResampleArgs),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth { seed, layout, dim, clusters, noise, count, out, output } => {
            commands::synth(seed, &layout, dim, clusters, noise, count, &out, &output)
        }
        Command::Layout { layout, output } => commands::layout(&layout, &output),
        Command::Mask { layout, packs, enumerate, output } => commands::mask(&layout, packs, enumerate, &output),
        Command::Check { seed, output } => check::run(seed, &output),
        Command::Bench { seed, layout, dim, skip_dense, output } => {
            commands::bench(seed, &layout, dim, skip_dense, &output)
        }
        Command::Train(args) => commands::train(&args),
        Command::Roi { grid, output } => commands::roi(&grid, &output),
        Command::Resample(args) => commands::resample(&args),
    }
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    matches!(err.downcast_ref::<Error>(), Some(Error::InvalidArgument(_) | Error::PadFirst { .. }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}
