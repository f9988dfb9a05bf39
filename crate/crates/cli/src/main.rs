//! Command-line pipeline for patch-based image anomaly detection:
//! `synth`, `train`, `index`, `infer`, `eval`.
//!
//! Every subcommand reads the same flat `key=value` configuration
//! (see `config`), overridable with repeated `--set key=value`. Exit
//! codes: 0 success, 2 usage or configuration problem, 4 numerical
//! failure, 3 other IO failure.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchsvdd::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "patchsvdd",
    version,
    about = "Patch-level image anomaly detection and segmentation",
    long_about = "Trains a two-scale patch encoder on defect-free images, indexes their \
                  features, scores test images by nearest-normal-feature distance, and \
                  evaluates the resulting anomaly maps.\n\nAll commands read one flat \
                  key=value configuration file; --set overrides individual keys (later \
                  wins, unknown keys are rejected)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable; later wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Single-worker, byte-reproducible outputs for a fixed seed.
    #[arg(long)]
    deterministic: bool,

    /// Replace outputs that already exist.
    #[arg(long)]
    overwrite: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::from_sources(self.config.as_deref(), &self.set)?;
        if self.deterministic {
            config.deterministic = true;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic dataset under data_root.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Verify the existing dataset is byte-identical to a fresh
        /// render of the same seed instead of generating.
        #[arg(long)]
        check: bool,
    },
    /// Train the two-scale patch encoder on the normal images.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Encode the training images and build both feature banks.
    Index {
        #[command(flatten)]
        common: Common,
    },
    /// Score every test image into anomaly maps and a score manifest.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate an infer run: AUROC, intrinsic dimension, baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also run the raw-pixel nearest-neighbor baseline.
        #[arg(long)]
        baseline_raw: bool,
        /// Also run the untrained random-encoder baseline.
        #[arg(long)]
        baseline_random: bool,
    },
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common, check } => {
            pipeline::cmd_synth(&common.resolve()?, *check, common.overwrite)
        }
        Command::Train { common } => pipeline::cmd_train(&common.resolve()?, common.overwrite),
        Command::Index { common } => pipeline::cmd_index(&common.resolve()?, common.overwrite),
        Command::Infer { common } => pipeline::cmd_infer(&common.resolve()?, common.overwrite),
        Command::Eval { common, baseline_raw, baseline_random } => pipeline::cmd_eval(
            &common.resolve()?,
            *baseline_raw,
            *baseline_random,
            common.overwrite,
        ),
    }
}

/// 2 for anything the caller can fix in the invocation or config,
/// 4 for numerical breakdown, 3 for IO and file-format trouble.
fn exit_code(error: &Error) -> u8 {
    match error {
        Error::EmptyInput(_)
        | Error::ShapeMismatch(_)
        | Error::InvalidArgument(_)
        | Error::MissingPath(_) => 2,
        Error::NonFinite(_) => 4,
        Error::Format { .. } | Error::Io { .. } | Error::Image { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            let mut source = std::error::Error::source(&error);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code(&error))
        }
    }
}
