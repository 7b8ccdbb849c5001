//! `ddanet` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddanet::model::SIZE_MULTIPLE;

const THREADS_VAR: &str = "DDANET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ddanet", version, about = "Dual-decoder attention network for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch JSON log.
    Train(TrainArgs),
    /// Predict masks (and optionally reconstructions and attention maps).
    Infer(InferArgs),
    /// Score a checkpoint on a directory of image/mask pairs.
    Eval(EvalArgs),
    /// Time single-image forward passes.
    Bench(BenchArgs),
    /// Write a synthetic dataset in the images/ + masks/ layout.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Widths 32, 64, 128, 256.
    Default,
    /// Widths 4, 8, 16, 32.
    Tiny,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "synthetic"])))]
pub struct TrainArgs {
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on this many generated images instead of a dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Square training resolution; a multiple of 16.
    #[arg(long, default_value_t = 64, value_parser = parse_size)]
    pub size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Log path; defaults to the checkpoint path with extension `log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Fraction of the data used for training; the rest validates. 1 trains
    /// on everything without validation.
    #[arg(long, default_value_t = 0.88)]
    pub train_fraction: f64,
    /// Also write `<out>.epochN` every this many epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Disable attention gating.
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outdir: PathBuf,
    /// Also write the grayscale reconstruction.
    #[arg(long)]
    pub gray: bool,
    /// Also write each attention map, upsampled and min-max scaled to 8 bits.
    #[arg(long)]
    pub attn: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Square input size; defaults to the model's training size.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<usize>,
    /// Timed forward passes.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Untimed passes before timing.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 64, value_parser = parse_size)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v == 0 || v % SIZE_MULTIPLE != 0 {
        return Err(format!("{v} is not a positive multiple of {SIZE_MULTIPLE}"));
    }
    Ok(v)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
