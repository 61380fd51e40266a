mod ablate;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::TrainOverrides;

#[derive(Parser, Debug)]
#[command(name = "apaseg", version, about = "Axis projection attention U-Net for small-target 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset
    Synth {
        /// JSON phantom spec; defaults are used without one
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Falls back to APASEG_SEED, then the spec
        #[arg(long, env = "APASEG_SEED")]
        seed: Option<u64>,
    },
    /// Train a network
    Train {
        /// JSON training config
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for the log, checkpoint and axis weights
        #[arg(long)]
        out: PathBuf,
        /// Continue from the state saved in --out
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Sliding-window inference over a directory of volumes
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Score predictions against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path; the per-case CSV is written next to it
        #[arg(long)]
        report: PathBuf,
        /// Classes to score
        #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2])]
        classes: Vec<u8>,
    },
    /// Run a variant x projection op x fusion mode grid
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        /// Results directory (matrix key `out`)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Finite-difference check of every operator and block
    Gradcheck {
        /// Only run checks whose name contains this string
        #[arg(long)]
        filter: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out, count, seed } => commands::synth(spec.as_deref(), &out, count, seed),
        Command::Train { config, out, resume, overrides } => {
            commands::train(config.as_deref(), &out, resume, &overrides)
        }
        Command::Infer { ckpt, input, out, overlap } => commands::infer(&ckpt, &input, &out, overlap),
        Command::Eval { pred, gt, report, classes } => commands::eval(&pred, &gt, &report, &classes),
        Command::Ablate { matrix, out, overrides } => ablate::run(&matrix, out.as_deref(), &overrides),
        Command::Gradcheck { filter } => commands::gradcheck(filter.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
