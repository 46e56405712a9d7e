//! `hmoe`: the command-line front end for the super-resolution pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hmoe", version = hmoe_core::VERSION, about = "Mixture-of-experts super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split an image folder into train/test manifests.
    PrepareData {
        /// Image folder, optionally one subfolder per category.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train:test ratio, e.g. `3:1`.
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write degraded LR copies of the test images at this scale.
        #[arg(long)]
        write_lr: Option<usize>,
    },
    /// Train a model and write checkpoints plus a training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Whole-image PSNR/SSIM of a checkpoint on a manifest of HR images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of HR images; defaults to the checkpoint's test manifest.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Must match the checkpoint's scale.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upscale one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel expert ids for one LR image, as PNG maps plus JSON.
    VizRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
