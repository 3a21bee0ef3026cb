//! `dualpath`: featurize, synth, split, train, eval, ablate, gradcheck.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status plus message. 1 usage, 2 data, 3 numerical.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<dualpath_core::Error> for CliError {
    fn from(e: dualpath_core::Error) -> Self {
        let message = e.to_string();
        match e {
            dualpath_core::Error::Config(_) => Self::usage(message),
            e if e.is_numerical() => Self::numerical(message),
            _ => Self::data(message),
        }
    }
}

#[derive(Parser)]
#[command(name = "dualpath", version, about = "Audio-visual highlight detection with a spectro-temporal dynamics pathway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the training-side commands.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mrhisum, tvsum or toy.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Log-mel spectrograms for every .wav in a directory.
    Featurize {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n_fft: usize,
        #[arg(long, default_value_t = 256)]
        hop: usize,
        #[arg(long, default_value_t = 128)]
        mels: usize,
    },
    /// Generate the synthetic benchmark and its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n_videos: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write k-fold manifests (test = fold i, val = fold i+1, train = rest).
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; artifacts go under the run directory.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint or a precomputed scores file against a split.
    Eval {
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        checkpoint: Option<PathBuf>,
        /// JSON lines of {"id": ..., "scores": [...]}.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Writes eval.txt and eval.jsonl here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare autodiff gradients with central differences per parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 4)]
        segments: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        /// Seed of the random check problem.
        #[arg(long, default_value_t = 12)]
        problem_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale the named op's backward pass by 1.5 (test hook).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Featurize { wav_dir, out_dir, n_fft, hop, mels } => commands::featurize(&wav_dir, &out_dir, n_fft, hop, mels),
        Command::Synth { out_dir, n_videos, cfg } => commands::synth(&out_dir, n_videos, &cfg),
        Command::Split { manifest, out_dir, folds, seed } => commands::split(&manifest, &out_dir, folds, seed),
        Command::Train { run_dir, cfg } => commands::train(&run_dir, &cfg),
        Command::Eval { checkpoint, scores, manifest, split, out_dir } => {
            commands::eval(checkpoint.as_deref(), scores.as_deref(), &manifest, &split, out_dir.as_deref())
        }
        Command::Ablate { axis, run_dir, cfg } => commands::ablate(&axis, &run_dir, &cfg),
        Command::Gradcheck { eps, tol, segments, frames, problem_seed, out, corrupt_backward, cfg } => commands::gradcheck(
            &cfg,
            commands::GradcheckOpts { eps, tol, segments, frames, problem_seed, out, corrupt_backward },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
