mod commands;
mod modelfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "MUSA_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "musa", version, about = "Banana variety and quality classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
enum Command {
    /// Write a seeded synthetic image corpus, one directory per class
    Synth(SynthArgs),
    /// Split a directory corpus into train/val/test and write a JSONL manifest
    Split(SplitArgs),
    /// Train a model and write model.ntw, model.json and train_log.csv
    Train(TrainArgs),
    /// Evaluate a trained model on one split and write report.json and report.txt
    Eval(EvalArgs),
    /// Print the most probable classes for one image
    Predict(PredictArgs),
    /// Render a Grad-CAM heatmap for one image
    Gradcam(GradcamArgs),
    /// Print the layer table of a model
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Architecture {
    /// Four-convolution baseline
    BaseCnn,
    /// MobileNet backbone with the 1024/512/256 dense head
    MobilenetTransfer,
    /// Plain MobileNet with the 1000-way top
    Mobilenet,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Where samples come from: a manifest, or a directory split on the fly.
#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
struct Source {
    /// Corpus root with one subdirectory per class
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSONL manifest written by `split`
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test fractions
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.76, 0.19, 0.05])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    /// Split fractions applied with --data
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.76, 0.19, 0.05])]
    fractions: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Architecture::MobilenetTransfer)]
    model: Architecture,
    /// Square input side; defaults to 256 for base-cnn and 224 for MobileNet
    #[arg(long)]
    input_size: Option<usize>,
    /// NTW file whose matching tensors initialize the model
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Number of leading layers to freeze; defaults to 20 for
    /// mobilenet-transfer and 0 for base-cnn
    #[arg(long)]
    freeze: Option<usize>,
    #[arg(long, default_value_t = 16)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Early-stopping patience in epochs; 0 disables it
    #[arg(long)]
    patience: Option<usize>,
    /// Train without rotation, shift and flip augmentation
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Directory written by `train`
    #[arg(long)]
    model_dir: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.76, 0.19, 0.05])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Directory for report.json and report.txt
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
}

#[derive(Debug, Args, Serialize)]
struct GradcamArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Class name or index; defaults to the predicted class
    #[arg(long)]
    class: Option<String>,
    /// PNG path
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw map as a one-tensor NTW file
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct InspectArgs {
    /// Directory written by `train`
    #[arg(long, conflicts_with = "model")]
    model_dir: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "model_dir")]
    model: Option<Architecture>,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    freeze: Option<usize>,
}

/// Exit status for an error: 1 usage, 2 data or format, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<musa::Error>()) {
        Some(musa::Error::Config(_)) => 1,
        Some(musa::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn init_threads() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| musa::Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(Some(n))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = match init_threads() {
        Ok(n) => n.unwrap_or_else(rayon::current_num_threads),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let resolved = serde_json::json!({ "threads": threads, "args": &cli });
    eprintln!("config: {resolved}");
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
