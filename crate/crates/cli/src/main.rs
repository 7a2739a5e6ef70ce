//! `bi-clstm` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, malformed files,
//! divergence, failed gradient check), 2 invalid arguments or configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bi_clstm::model::FeatureMode;
use bi_clstm::train::OptimizerKind;
use bi_clstm::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

#[derive(Parser, Debug)]
#[command(
    name = "bi-clstm",
    version,
    about = "Bidirectional convolutional LSTM for hyperspectral pixels"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled cube
    Synth(SynthArgs),
    /// Split, normalize, train and save a checkpoint
    Train(Box<TrainArgs>),
    /// Score a checkpoint on labeled pixels
    Eval(EvalArgs),
    /// Render a classification map
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny model
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    /// Spatial size as ROWSxCOLS
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Between-class spread over noise std
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    /// Leading bands shared by every class
    #[arg(long, default_value_t = 0)]
    pub shared_bands: usize,
    /// Approximate side of the rectangular class regions
    #[arg(long, default_value_t = 8)]
    pub region_size: usize,
    /// Spatially smooth noise relative to white noise
    #[arg(long, default_value_t = 0.5)]
    pub smooth_noise: f64,
    /// Cube file to write; labels go next to it with extension .hsl
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeatureModeArg {
    FullSequence,
    LastState,
}

impl From<FeatureModeArg> for FeatureMode {
    fn from(m: FeatureModeArg) -> Self {
        match m {
            FeatureModeArg::FullSequence => FeatureMode::FullSequence,
            FeatureModeArg::LastState => FeatureMode::LastState,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    SgdMomentum,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cube file (labels are read from the sibling .hsl)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training report; defaults to the checkpoint path with extension .json
    #[arg(long)]
    pub report: Option<PathBuf>,

    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub hidden_channels: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub band_group: Option<usize>,
    #[arg(long, value_enum)]
    pub feature_mode: Option<FeatureModeArg>,
    /// Use both directions (off keeps only the forward branch)
    #[arg(long, value_enum)]
    pub bidirectional: Option<Switch>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, value_enum)]
    pub augment: Option<Switch>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub forget_bias: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Train this many times with consecutive seeds and report mean and std
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PixelSet {
    /// Held-out pixels of the checkpoint's split
    Test,
    /// Training pixels of the checkpoint's split
    Train,
    /// Every labeled pixel
    Labeled,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cube file; defaults to the one recorded in the checkpoint
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub pixels: PixelSet,
    /// Metrics JSON; printed to stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// PPM image to write
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the predicted labels as an .hsl raster
    #[arg(long)]
    pub raster: Option<PathBuf>,
    /// Predict unlabeled pixels too
    #[arg(long)]
    pub all_pixels: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub bands: usize,
    #[arg(long, default_value_t = 1)]
    pub band_group: usize,
    #[arg(long, default_value_t = 2)]
    pub hidden_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, value_enum, default_value = "full-sequence")]
    pub feature_mode: FeatureModeArg,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Report JSON; printed to stdout when omitted
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(m)?, parse(n)?))
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(Error::Json(e))
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(Error::Argument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => error!("{e}"),
                Failure::Check(msg) => error!("{msg}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
