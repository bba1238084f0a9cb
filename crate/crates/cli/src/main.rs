//! `latent-origin` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error, 3 partial
//! failure (some images could not be attributed).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_origin::experiment::CACHE_DIR_ENV;
use latent_origin::inversion::{InitMode, StopRule};

#[derive(Parser, Debug)]
#[command(name = "latent-origin", version, about = "Attribute images to the latent generative model that produced them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads for per-image parallelism (default: all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Directory for trained models reused across runs
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an autoencoder from a TOML run config
    Train(TrainArgs),
    /// Fit a detection threshold for a trained model
    Calibrate(CalibrateArgs),
    /// Decide whether images came from a model
    Attribute(AttributeArgs),
    /// Run the two-model evaluation protocol from a TOML config
    Evaluate(EvaluateArgs),
    /// Run only the post-processing robustness sweep from a TOML config
    Robustness(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the training seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoint.json and manifest.json
    #[arg(long, default_value = "out/train")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Random,
    Encoder,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Random => InitMode::Random,
            InitArg::Encoder => InitMode::Encoder,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StopArg {
    Fixed,
    Adaptive,
}

impl From<StopArg> for StopRule {
    fn from(a: StopArg) -> Self {
        match a {
            StopArg::Fixed => StopRule::Fixed,
            StopArg::Adaptive => StopRule::Adaptive,
        }
    }
}

/// Inversion settings shared by `calibrate` and `evaluate`.
#[derive(Args, Debug, Clone)]
pub struct InversionArgs {
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Maximum optimization steps (default: 100 for encoder init, 400 for random)
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub stop: Option<StopArg>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub inversion: InversionArgs,
    /// Draw calibration samples from the latent prior instead of reconstructions
    #[arg(long)]
    pub prior: bool,
    /// Keep calibration samples at full float precision
    #[arg(long)]
    pub no_8bit: bool,
    #[arg(long, default_value = "out/calibrate")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    /// Calibration profile written by `calibrate`
    #[arg(long)]
    pub profile: PathBuf,
    /// Model checkpoint the profile was fitted on
    #[arg(long)]
    pub model: PathBuf,
    /// PNG files or directories of PNG files
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "out/attribute")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the run seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Calibration sample count
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub inversion: InversionArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(commands::Status::Done) => ExitCode::SUCCESS,
        Ok(commands::Status::Partial(failed)) => {
            eprintln!("warning: {failed} image(s) could not be attributed");
            ExitCode::from(3)
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
