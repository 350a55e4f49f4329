mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sadh_core::tiler::MaskMode;

/// Reproducible proposal-head experiments: synthetic data, masked-crop
/// tiling, training, evaluation, score analyses and ablations.
#[derive(Debug, Parser)]
#[command(name = "sadh", version)]
pub struct Cli {
    /// Experiment configuration (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic blob-lesion dataset.
    Synth {
        /// Number of images (defaults to train + test images of the config).
        #[arg(long)]
        images: Option<usize>,
    },
    /// Cut a dataset into fixed-size tiles.
    Tile {
        /// Dataset directory holding `annotations.json` and `images/`.
        #[arg(long)]
        input: PathBuf,
        /// Tile edge in pixels (default from the config)
        #[arg(long)]
        tile_size: Option<usize>,
        /// `masked` or `keep-partial` (default from the config)
        #[arg(long, value_parser = parse_mask_mode)]
        mask_mode: Option<MaskMode>,
    },
    /// Train a model and write its checkpoint and loss log.
    Train(DataArg),
    /// Evaluate a checkpoint (AP/AR at the configured IoU).
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Confidence falloff curves and score/IoU correlations for one or more checkpoints.
    Analyze {
        /// Checkpoint written by `train`; repeat to compare several
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train and evaluate the variants of ablation groups.
    Ablate {
        /// Groups to run: 1 convolution, 2 loss, 3 metric (default all).
        #[arg(long, value_delimiter = ',')]
        group: Vec<usize>,
        /// Seeds to repeat the sweep with (default the configured seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory; without it the configured synthetic split is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, String> {
    s.parse().map_err(|e: sadh_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
