mod commands;
mod manifest;

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use effo_core::evaluator::DEFAULT_KS;
use effo_core::facets::{DEFAULT_T1, DEFAULT_T2};
use effo_core::feature_store::StoreError;
use effo_core::matrix_file::MatrixFileError;
use effo_core::pipeline::{PipelineError, DEFAULT_K};
use effo_core::synth::SynthError;

/// Two-stage place recognition: global ranking, local re-ranking and
/// evaluation over `.efvp` feature files.
#[derive(Debug, Parser)]
#[command(name = "effo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a feature file against its invariants.
    Validate {
        path: PathBuf,
    },
    /// Rank queries against a gallery and optionally re-rank by local matches.
    Retrieve(RetrieveArgs),
    /// Compute Recall@K for a results file.
    Eval(EvalArgs),
    /// Evaluate a grid of thresholds, shortlist sizes and local-feature files.
    Sweep(SweepArgs),
    /// Generate a synthetic gallery and query set with known ground truth.
    Synth(SynthArgs),
    /// Compute the score map and keypoints of one attention layer.
    Facets(FacetsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Results file (JSON lines).
    #[arg(long, short)]
    out: PathBuf,
    /// Shortlist size.
    #[arg(long, default_value_t = DEFAULT_K, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    k: usize,
    /// Keypoint score threshold, applied to stored scores.
    #[arg(long, default_value_t = DEFAULT_T1)]
    t1: f32,
    /// Local match similarity threshold.
    #[arg(long, default_value_t = DEFAULT_T2, allow_negative_numbers = true)]
    t2: f32,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    rerank: Switch,
    /// Project global descriptors to this many PCA components fitted on
    /// the gallery.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// Correct within this many meters (lat/lon tags). Default 25.
    #[arg(long, conflicts_with = "frame_window")]
    radius_m: Option<f64>,
    /// Correct within this many frames (frame-index tags). Default 10.
    #[arg(long)]
    frame_window: Option<u64>,
    /// Exclude the boundary distance itself.
    #[arg(long)]
    strict: bool,
    /// Cutoffs for Recall@K.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Defaults to the output extension, else CSV.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Write here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Grid axes, e.g. `t1=0,0.05;t2=0.5,0.65;k=5,100` or
    /// `layer-file=label:gallery.efvp:queries.efvp`. Repeatable.
    #[arg(long = "grid", required = true)]
    grid: Vec<String>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Write CSV here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for gallery.efvp, queries.efvp and truth.json.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_places: Option<usize>,
    #[arg(long)]
    gallery_per_place: Option<usize>,
    #[arg(long)]
    d_g: Option<usize>,
    #[arg(long)]
    d_l: Option<usize>,
    #[arg(long)]
    locals_min: Option<usize>,
    #[arg(long)]
    locals_max: Option<usize>,
    #[arg(long)]
    global_noise: Option<f32>,
    #[arg(long)]
    local_noise: Option<f32>,
    #[arg(long)]
    distractor_fraction: Option<f32>,
    #[arg(long)]
    geo_spacing_m: Option<f64>,
}

#[derive(Debug, Args)]
struct FacetsArgs {
    /// `(p + 1) × d_model` token matrix, `[CLS]` first (EFMT).
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    wq: PathBuf,
    #[arg(long)]
    wk: PathBuf,
    #[arg(long)]
    wv: PathBuf,
    /// `3 × d` matrix with rows b_Q, b_K, b_V (EFMT). Zero if omitted.
    #[arg(long)]
    biases: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Register tokens following `[CLS]` in the token matrix. They are
    /// dropped before projection, so they are neither patches nor part of
    /// the score-map softmax.
    #[arg(long, default_value_t = 0)]
    registers: usize,
    #[arg(long, default_value_t = DEFAULT_T1)]
    t1: f32,
    /// Do not divide score-map logits by sqrt(d / h).
    #[arg(long)]
    unscaled: bool,
    /// Distance of the layer from the output, recorded in the output.
    #[arg(long, default_value_t = 1)]
    layer_offset: u32,
    /// Write JSON here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Exit 1 for domain failures, 2 for I/O and usage errors.
#[derive(Debug)]
pub enum CliError {
    Domain(String),
    Io(String),
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Io(_) | CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Domain(m) | CliError::Io(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<MatrixFileError> for CliError {
    fn from(e: MatrixFileError) -> Self {
        match e {
            MatrixFileError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io(e) => CliError::Io(e.to_string()),
            PipelineError::InvalidParameter(_) | PipelineError::Grid(_) => CliError::Usage(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            SynthError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("EFFO_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("EFFO_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<u8, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Validate { path } => commands::validate(&path),
        Command::Retrieve(args) => commands::retrieve(&args).map(|()| 0),
        Command::Eval(args) => commands::eval(&args).map(|()| 0),
        Command::Sweep(args) => commands::sweep(&args).map(|()| 0),
        Command::Synth(args) => commands::synth(&args).map(|()| 0),
        Command::Facets(args) => commands::facets(&args).map(|()| 0),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("effo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
