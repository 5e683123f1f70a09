//! `potq` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 malformed model file.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{Ctx, PathChoice};
use config::ExperimentConfig;
use potq::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "potq", version, about = "Power-of-two quantization experiments")]
struct Cli {
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true, env = "POTQ_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float baseline; writes float.json and float_metrics.csv.
    TrainFloat {
        #[arg(long)]
        config: PathBuf,
    },
    /// Quantization-aware fine-tuning; writes qat.pqt, qat_metrics.csv and
    /// (STE) qat_master.json.
    Qat {
        #[arg(long)]
        config: PathBuf,
        /// Float checkpoint; defaults to float.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of a packed model on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = PathChoice::Both)]
        path: PathChoice,
    },
    /// Quantize a float checkpoint without training and pack it.
    Pack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to model.pqt in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// MAC cost table and exhaustive product self-check.
    MacReport,
    /// Re-quantize the STE master weights at several pruning factors.
    SweepPruning {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to qat_master.json in the output directory.
        #[arg(long)]
        master: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
        pf: Vec<f32>,
    },
    /// Packed size and memory traffic of a model file.
    SizeReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8)]
        baseline_bits: u8,
        #[arg(long, default_value_t = 32)]
        word_bits: u32,
    },
}

fn ctx(config: &std::path::Path, out_dir: Option<PathBuf>) -> Result<Ctx> {
    Ctx::new(ExperimentConfig::load(config)?, out_dir)
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli.out_dir;
    match cli.command {
        Command::TrainFloat { config } => commands::train_float(&ctx(&config, out)?)?,
        Command::Qat { config, checkpoint } => commands::qat(&ctx(&config, out)?, checkpoint.as_deref())?,
        Command::Eval { config, model, path } => commands::eval(&ctx(&config, out)?, &model, path)?,
        Command::Pack {
            config,
            checkpoint,
            output,
        } => commands::pack(&ctx(&config, out)?, &checkpoint, output.as_deref())?,
        Command::MacReport => return commands::mac_report(),
        Command::SweepPruning { config, master, pf } => {
            commands::sweep_pruning(&ctx(&config, out)?, master.as_deref(), &pf)?
        }
        Command::SizeReport {
            model,
            baseline_bits,
            word_bits,
        } => commands::size_report(&model, baseline_bits, word_bits)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Format(_) | Error::Json(_) => 3,
                _ => 1,
            })
        }
    }
}
