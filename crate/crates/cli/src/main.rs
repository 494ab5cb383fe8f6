//! `spvox`: generate synthetic datasets, train networks and supernets, run
//! the architecture search, evaluate, and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/runtime error.

mod commands;
mod util;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "spvox", version, about = "Sparse point-voxel engine")]
struct Cli {
    /// Suppress elapsed-time prefixes so output is byte-reproducible.
    #[arg(long, global = true)]
    no_timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the KITTI directory layout.
    GenData {
        /// Scene generator configuration (JSON); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Total scene count (train + validation).
        #[arg(long)]
        count: usize,
        /// Fraction of trailing scene ids reserved for validation.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Train a fixed architecture.
    Train {
        /// Architecture file (canonical JSON).
        #[arg(long)]
        arch: PathBuf,
        /// Dataset directory from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "point-voxel")]
        family: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a weight-sharing supernet over a search space.
    TrainSupernet {
        /// Search-space file (JSON).
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "point-voxel")]
        family: String,
        #[arg(long, default_value_t = 15)]
        phase1_epochs: usize,
        #[arg(long, default_value_t = 0.24)]
        phase1_lr: f32,
        #[arg(long, default_value_t = 15)]
        phase2_epochs: usize,
        #[arg(long, default_value_t = 0.096)]
        phase2_lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evolutionary architecture search over a trained supernet.
    Search {
        /// Supernet checkpoint from `train-supernet`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Resource constraint in MACs.
        #[arg(long)]
        macs_limit: f64,
        /// Best architecture output (canonical JSON).
        #[arg(long)]
        out: PathBuf,
        /// Generation log (newline-delimited JSON records).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "point-voxel")]
        family: String,
        #[arg(long, default_value_t = 50)]
        population: usize,
        #[arg(long, default_value_t = 20)]
        generations: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 0.1)]
        mutation_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training scenes used for BN recalibration per candidate.
        #[arg(long, default_value_t = 8)]
        calib_scenes: usize,
        /// Validation scenes used for fitness.
        #[arg(long, default_value_t = 16)]
        fitness_scenes: usize,
    },
    /// Evaluate a trained network: per-class IoU and mean IoU.
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "point-voxel")]
        family: String,
        /// Evaluate the train split instead of the validation split.
        #[arg(long)]
        train_split: bool,
    },
    /// Per-operation wall time and MACs of one architecture on a dataset.
    Benchmark {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "point-voxel")]
        family: String,
        /// Scenes to measure (from the validation split).
        #[arg(long, default_value_t = 5)]
        scenes: usize,
    },
    /// Estimate MACs from calibration statistics.
    EstimateMacs {
        #[arg(long)]
        arch: PathBuf,
        /// Calibration dataset directory.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "point-voxel")]
        family: String,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    let printer = util::Printer::new(!cli.no_timestamps);
    let result = match cli.command {
        Command::GenData {
            config,
            out,
            count,
            val_fraction,
        } => commands::gen_data(&printer, config.as_deref(), &out, count, val_fraction),
        Command::Train {
            arch,
            data,
            family,
            epochs,
            lr,
            momentum,
            workers,
            seed,
            out,
        } => commands::train(
            &printer,
            &arch,
            &data,
            &family,
            epochs,
            lr,
            momentum,
            workers,
            seed,
            out.as_deref(),
        ),
        Command::TrainSupernet {
            space,
            data,
            out,
            family,
            phase1_epochs,
            phase1_lr,
            phase2_epochs,
            phase2_lr,
            momentum,
            workers,
            seed,
        } => commands::train_supernet(
            &printer,
            &space,
            &data,
            &out,
            &family,
            phase1_epochs,
            phase1_lr,
            phase2_epochs,
            phase2_lr,
            momentum,
            workers,
            seed,
        ),
        Command::Search {
            ckpt,
            space,
            data,
            macs_limit,
            out,
            log,
            family,
            population,
            generations,
            top_k,
            mutation_prob,
            seed,
            calib_scenes,
            fitness_scenes,
        } => commands::search(
            &printer,
            commands::SearchArgs {
                ckpt,
                space,
                data,
                macs_limit,
                out,
                log,
                family,
                population,
                generations,
                top_k,
                mutation_prob,
                seed,
                calib_scenes,
                fitness_scenes,
            },
        ),
        Command::Eval {
            arch,
            weights,
            data,
            family,
            train_split,
        } => commands::eval(&printer, &arch, &weights, &data, &family, train_split),
        Command::Benchmark {
            arch,
            data,
            family,
            scenes,
        } => commands::benchmark(&printer, &arch, &data, &family, scenes),
        Command::EstimateMacs {
            arch,
            calib,
            family,
        } => commands::estimate_macs(&printer, &arch, &calib, &family),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
