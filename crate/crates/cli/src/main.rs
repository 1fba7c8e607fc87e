//! `ssmamc`: generate data, train, evaluate, ablate and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

mod alloc;
mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(ssmamc::Error),
}

impl From<ssmamc::Error> for CliError {
    fn from(e: ssmamc::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_numerical() => 3,
            CliError::Lib(ssmamc::Error::Config(_) | ssmamc::Error::InvalidArgument(_)) => 1,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ssmamc", version, about = "Selective-SSM modulation classifier")]
struct Cli {
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize labelled I/Q datasets, one AMCD file per length.
    Gen(GenArgs),
    /// Train a model; writes a checkpoint and the loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train full, no-denoise and no-SSM variants over matched seeds.
    Ablate(AblateArgs),
    /// Time training and inference against length or batch size.
    Bench(BenchArgs),
}

/// Architecture settings shared by train, ablate and bench.
#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub num_blocks: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_state: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub expand: Option<usize>,
    #[arg(long)]
    pub use_denoise: Option<bool>,
    #[arg(long)]
    pub use_ssm: Option<bool>,
    #[arg(long)]
    pub use_gate: Option<bool>,
    #[arg(long)]
    pub use_norm: Option<bool>,
    /// sequential | parallel
    #[arg(long)]
    pub scan_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Named grid supplying defaults; only `torchsig-qam` exists.
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated scheme names, e.g. qam64,qam256.
    #[arg(long)]
    pub schemes: Option<String>,
    /// Comma-separated lengths.
    #[arg(long, alias = "length")]
    pub lengths: Option<String>,
    /// SNR grid as start:step:stop in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snrs: Option<String>,
    #[arg(long)]
    pub per_cell: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ideal | rrc
    #[arg(long)]
    pub pulse: Option<String>,
    #[arg(long)]
    pub rolloff: Option<f64>,
    #[arg(long)]
    pub span: Option<usize>,
    #[arg(long)]
    pub sps: Option<usize>,
    #[arg(long)]
    pub phase_offset: Option<bool>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of each (class, SNR) cell used for training; the rest is
    /// scored after training.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Comma-separated seeds shared by every variant.
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// length | batch
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated lengths for the length sweep.
    #[arg(long)]
    pub lengths: Option<String>,
    /// Length for the batch sweep.
    #[arg(long)]
    pub length: Option<usize>,
    /// Fixed batch for the length sweep.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Largest batch of the batch sweep.
    #[arg(long)]
    pub max_batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Runs estimated above this many bytes become failure rows.
    #[arg(long)]
    pub memory_budget: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start workers: {e}")))?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Bench(a) => commands::bench(a, &ALLOC),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssmamc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
