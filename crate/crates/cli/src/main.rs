use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod checks;
mod data;
mod images;
mod manifest;
mod train;

/// Single-image HDR reconstruction with feature-masked convolutions.
#[derive(Parser)]
#[command(name = "hdrmask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an LDR capture of an HDR image and write its exposure mask.
    SimulateLdr(images::SimulateArgs),
    /// Write the exposure mask of an LDR image and the mask after every layer.
    Mask(images::MaskArgs),
    /// Select textured patches from a directory of HDR images into a shard.
    SamplePatches(data::SampleArgs),
    /// Write random binary hole masks.
    GenInpaintMasks(data::HoleMaskArgs),
    /// Pre-train the network on image inpainting.
    TrainInpaint(train::InpaintArgs),
    /// Train or fine-tune the network on HDR patch shards.
    FinetuneHdr(train::FinetuneArgs),
    /// Reconstruct an HDR image from one LDR image.
    Reconstruct(images::ReconstructArgs),
    /// Score a model on HDR patch shards, overall and per saturation decile.
    Eval(train::EvalArgs),
    /// Run the masking-mode and pre-training ablation on procedural data.
    Ablate(train::AblateArgs),
    /// Finite-difference check of every loss term and a small masked U-Net.
    Gradcheck(checks::GradcheckArgs),
    /// Round-trip and fuzz every file reader.
    Formats(checks::FormatsArgs),
}

/// Problems with the invocation itself rather than with running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SimulateLdr(a) => images::simulate(a),
        Command::Mask(a) => images::mask(a),
        Command::SamplePatches(a) => data::sample(a),
        Command::GenInpaintMasks(a) => data::hole_masks(a),
        Command::TrainInpaint(a) => train::inpaint(a),
        Command::FinetuneHdr(a) => train::finetune(a),
        Command::Reconstruct(a) => images::reconstruct(a),
        Command::Eval(a) => train::eval(a),
        Command::Ablate(a) => train::ablate(a),
        Command::Gradcheck(a) => checks::gradcheck(a),
        Command::Formats(a) => checks::formats(a),
    }
}

/// Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.
fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
