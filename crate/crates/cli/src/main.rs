//! `fakeformer`: synthesize pseudo-fakes, train, evaluate, infer and verify.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fakeformer::Error;

#[derive(Parser, Debug)]
#[command(name = "fakeformer", version, about = "Deepfake detection with blending-based pseudo-fakes")]
struct Cli {
    /// Run configuration (JSON); defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, synthesis and data order; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results are bit-reproducible for any count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write real frames and pseudo-fakes with their boundaries and target heatmaps.
    Synth(SynthArgs),
    /// Train a detector and write its weights and history.
    Train(TrainArgs),
    /// Score a labelled manifest and report AUC/AP.
    Eval(EvalArgs),
    /// Score one image and write its predicted heatmap.
    Infer(InferArgs),
    /// Run the gradient and oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generate N procedural faces instead of reading `paths.manifest`.
    #[arg(long, value_name = "N")]
    pub toy: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train on N procedural faces instead of `paths.manifest`.
    #[arg(long, value_name = "N")]
    pub toy: Option<usize>,
    /// Validate on M procedural faces disjoint from the training faces.
    #[arg(long, value_name = "M")]
    pub val_toy: Option<usize>,
    /// Also write weights every K epochs.
    #[arg(long, value_name = "K")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// FKF1 weights; the model config is read from the `.json` sidecar.
    #[arg(long)]
    pub weights: PathBuf,
    /// Labelled manifest; defaults to `paths.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Evaluate on N procedural reals and their pseudo-fakes.
    #[arg(long, value_name = "N", conflicts_with = "manifest")]
    pub toy: Option<usize>,
    /// Report AUC per Mask-SSIM bin.
    #[arg(long)]
    pub stratify: bool,
    /// Report AUC/AP under each configured perturbation and severity.
    #[arg(long)]
    pub perturb: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// FKF1 weights; the model config is read from the `.json` sidecar.
    #[arg(long)]
    pub weights: PathBuf,
    pub image: PathBuf,
    /// Landmark sidecar; checked against the image when given.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Seeds for the gradient checks.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Random instances per oracle check.
    #[arg(long, default_value_t = 500)]
    pub cases: usize,
    /// Corrupt the backward rule of the named op (self-test of the suite).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    VerifyFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
