use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod dump;
mod manifest;

/// Multi-scale time-frequency attention for rare sound event detection.
///
/// Log verbosity is read from the MTFA_LOG environment variable
/// (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "mtfa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mix events over backgrounds into a labelled dataset.
    Synthesize(SynthesizeArgs),
    /// Compute log-mel spectrogram caches for a directory of WAV files.
    Featurize(FeaturizeArgs),
    /// Train a per-class detector.
    Train(TrainArgs),
    /// Detect events in a directory of WAV files.
    Infer(InferArgs),
    /// Score detections against reference annotations.
    Evaluate(EvaluateArgs),
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not a probability in [0, 1]"))
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} must lie strictly between 0 and 1"))
    }
}

fn dropout_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} must lie in [0, 1)"))
    }
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Directory with one sub-directory of WAV files per event class.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub events_dir: Option<PathBuf>,
    /// Directory of background WAV files.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub backgrounds_dir: Option<PathBuf>,
    /// Use generated stand-in sources (beep, burst, sweep) instead of files.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Mixtures per event class.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Event-to-background ratios in dB, drawn uniformly per mixture.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-6,0,6")]
    pub ebr: Vec<f64>,
    /// Probability that a mixture contains an event.
    #[arg(long, default_value_t = 0.99, value_parser = probability)]
    pub presence: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30.0)]
    pub clip_seconds: f64,
    /// Sample rate of generated sources.
    #[arg(long, default_value_t = 44100)]
    pub sample_rate: u32,
    /// Generated sources per event kind.
    #[arg(long, default_value_t = 4)]
    pub sources_per_kind: usize,
    /// Generated background recordings.
    #[arg(long, default_value_t = 4)]
    pub backgrounds: usize,
    /// Run manifest path (default: <out>/run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub wav_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run manifest path (default: <out>/run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskArg {
    Hourglass,
    SingleScale,
    None,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `.mtfaspec` caches, or of WAV files when it has none.
    #[arg(long)]
    pub data: PathBuf,
    /// Reference annotations (default: <data>/annotations.tsv).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Target class. babycry, glassbreak and gunshot have built-in dropout
    /// and threshold defaults; other names need --dropout and --threshold.
    #[arg(long = "class")]
    pub class: String,
    /// Output directory for model.ckpt, train_log.jsonl and run.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_parser = dropout_rate)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = open_unit)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 40)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of clips held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Compute the validation loss on the training clips instead.
    #[arg(long)]
    pub validate_on_train: bool,
    /// Stop once the validation loss falls below this value.
    #[arg(long)]
    pub target_loss: Option<f64>,
    /// Channels inside the attention module.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// GRU units per direction.
    #[arg(long, default_value_t = 64)]
    pub units: usize,
    #[arg(long, value_enum, default_value_t = MaskArg::Hourglass)]
    pub mask: MaskArg,
    /// Run manifest path (default: <out>/run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub wav_dir: PathBuf,
    /// Detection TSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Decision threshold (default: the checkpoint's).
    #[arg(long, value_parser = open_unit)]
    pub threshold: Option<f64>,
    /// Median filter length in milliseconds.
    #[arg(long, default_value_t = 540.0)]
    pub median_ms: f64,
    /// Write per-clip attention images and matrices here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Run manifest path (default: <out>.run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, default_value_t = 500.0)]
    pub collar_ms: f64,
    /// Report only this class.
    #[arg(long = "class")]
    pub class: Option<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run manifest path (default: <out>.run.json, else <det>.eval.run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTFA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
