mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fullglow::Error;

/// Fully conditional Glow for paired image-to-image translation.
#[derive(Parser, Debug)]
#[command(name = "fullglow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic segmentation/photo pairs.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of semantic classes (2..=8).
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        /// key=value run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, rewritten every checkpoint_interval iterations.
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration value, e.g. `--set lr=0.0003`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Loss trace CSV; defaults to the checkpoint path with a .trace.csv extension.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Continue from the checkpoint at --out instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Draw target images for one segmentation map.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Segmentation image (PPM).
        #[arg(long)]
        cond: PathBuf,
        /// Instance-id map (16-bit PGM) for boundary conditioning.
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a photo under a different segmentation map.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        content_photo: PathBuf,
        #[arg(long)]
        content_seg: PathBuf,
        #[arg(long)]
        target_seg: PathBuf,
        #[arg(long)]
        content_instances: Option<PathBuf>,
        #[arg(long)]
        target_instances: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mean conditional bits per dimension of a dataset.
    Bpd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the acceptance checks.
    Verify {
        /// Short smoke run instead of the full training experiments.
        #[arg(long)]
        quick: bool,
    },
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => EXIT_USAGE,
        Error::Config(_) => EXIT_VALIDATION,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Format { .. } | Error::Checkpoint(_) | Error::Io(_) => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { n, size, seed, classes, out } => commands::gen_data(n, size, seed, classes, &out),
        Command::Train { config, data, out, overrides, seed, iterations, trace, resume } => {
            commands::train(commands::TrainArgs { config, data, out, overrides, seed, iterations, trace, resume })
        }
        Command::Sample { ckpt, cond, instances, temperature, n, seed, out } => {
            commands::sample(&ckpt, &cond, instances.as_deref(), temperature, n, seed, &out)
        }
        Command::Transfer { ckpt, content_photo, content_seg, target_seg, content_instances, target_instances, out } => {
            commands::transfer(commands::TransferArgs {
                ckpt,
                content_photo,
                content_seg,
                target_seg,
                content_instances,
                target_instances,
                out,
            })
        }
        Command::Bpd { ckpt, data } => commands::bpd(&ckpt, &data),
        Command::Verify { quick } => commands::verify(quick),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("fullglow: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
