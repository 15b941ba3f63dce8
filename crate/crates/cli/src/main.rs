//! `ct-fusion` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data / format / IO failure.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "ct-fusion", version, about = "Image + class-prompt fusion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, history and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Classify individual images.
    Predict(PredictArgs),
    /// Write attention or Grad-CAM heatmaps.
    Explain(ExplainArgs),
    /// Train every row of an ablation table.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic class-folder dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Class-folder dataset root (overrides `data.path`).
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Warn about unknown config keys instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Evaluate every image under this class-folder root. Without it, the
    /// test split of the checkpoint's own dataset is rebuilt.
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    /// Directory for `metrics.json` / `metrics.csv`; stdout when omitted.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// PPM / PGM files.
    #[arg(required = true)]
    pub images: Vec<std::path::PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Attention,
    Gradcam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Layer {
    Fused,
    Local,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Single image (repeatable).
    #[arg(long = "image")]
    pub images: Vec<std::path::PathBuf>,
    /// Explain every image under a class-folder root.
    #[arg(long, conflicts_with = "images")]
    pub data: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "gradcam")]
    pub method: Method,
    /// Target class index for Grad-CAM; the predicted class by default.
    #[arg(long = "class")]
    pub class_index: Option<usize>,
    #[arg(long, value_enum, default_value = "fused")]
    pub layer: Layer,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Table {
    Modules,
    AffmBranches,
    FebAttention,
    All,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub table: Table,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Sampled coordinates per parameter tensor in the model check.
    #[arg(long, default_value_t = 64)]
    pub per_tensor: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CT_FUSION_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("CT_FUSION_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
