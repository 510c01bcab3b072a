//! `seqrank`: data generation, training, evaluation, serving and benchmarks.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure. Every command echoes its resolved configuration (including the
//! seed) to stderr before doing any work.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqrank_serving::alloc::CountingAllocator;

use config::{Dur, List, Named};
use seqrank_core::losses::{NalLossType, NegativeMode};
use seqrank_core::model::Kernel;
use seqrank_core::trainer::OptimizerKind;

// Lets `bench` and `serve` report hot-path allocation counts.
#[global_allocator]
static GLOBAL: CountingAllocator = CountingAllocator;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<seqrank_core::Error> for CliError {
    fn from(e: seqrank_core::Error) -> Self {
        match e {
            seqrank_core::Error::Validation(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<seqrank_serving::ServeError> for CliError {
    fn from(e: seqrank_serving::ServeError) -> Self {
        use seqrank_serving::ServeError;
        match e {
            ServeError::BadRequest(m) => CliError::Usage(m),
            ServeError::Core(e) => e.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(name = "seqrank", version, about = "Sequence ranking model: data, training, evaluation, serving")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Single source of all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// key = value file; command-line flags take precedence.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic store plus train/eval example files.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// HIT@K per head for one or more checkpoints.
    Eval(EvalArgs),
    /// HTTP ranking service.
    Serve(ServeArgs),
    /// Load-test the serving pipeline under each ablation config.
    Bench(BenchArgs),
    /// Compare backward-pass gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Train and evaluate a grid of next-action-loss settings.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Lifelong tokens per user.
    #[arg(long)]
    ll: Option<usize>,
    /// Real-time tokens per user.
    #[arg(long)]
    rt: Option<usize>,
    /// Impression tokens per user.
    #[arg(long)]
    imp: Option<usize>,
    /// Request chunks per user; the last one is held out for eval.
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sibling_cosine: Option<f64>,
    /// Store the assembled NN features with every example.
    #[arg(long)]
    nn_features: bool,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    k_ll: Option<usize>,
    #[arg(long)]
    k_rt: Option<usize>,
    #[arg(long)]
    k_imp: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<Named<OptimizerKind>>,
    #[arg(long, allow_negative_numbers = true)]
    w_nal: Option<f64>,
    /// in_batch | impression
    #[arg(long)]
    nal_mode: Option<Named<NegativeMode>>,
    /// sampled_softmax | cross_entropy
    #[arg(long)]
    nal_loss: Option<Named<NalLossType>>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Leave the next-action loss out of the step entirely.
    #[arg(long)]
    no_nal: bool,
    /// Train the no-sequence baseline.
    #[arg(long)]
    no_sequence: bool,
    /// Per-step metrics, JSON lines.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated checkpoints; the first is the baseline for deltas.
    #[arg(long)]
    model: Option<List<String>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kernel: Option<Named<Kernel>>,
    /// Also write the metrics as JSON.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint; a freshly initialized model when absent.
    #[arg(long)]
    model: Option<String>,
    /// Sequence store to preload (store.tav2).
    #[arg(long)]
    store: Option<String>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    ablation: Option<seqrank_serving::Ablation>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    max_wait: Option<Dur>,
    #[arg(long)]
    arena_mb: Option<usize>,
    /// Write NN features of served items here on shutdown.
    #[arg(long)]
    log_nn: Option<String>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated configs (baseline, arena_only, dedup_only, all) or `every`.
    #[arg(long)]
    ablation: Option<String>,
    /// Offered load, candidate items per second.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration: Option<Dur>,
    /// Checkpoint; a freshly initialized full-size model when absent.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    ll: Option<usize>,
    #[arg(long)]
    rt: Option<usize>,
    #[arg(long)]
    imp: Option<usize>,
    #[arg(long)]
    candidates_min: Option<usize>,
    #[arg(long)]
    candidates_max: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    max_wait: Option<Dur>,
    #[arg(long)]
    arena_mb: Option<usize>,
    #[arg(long)]
    drain: Option<Dur>,
    /// Text report path; JSON lines go next to it with a .jsonl extension.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    /// f32 | f64 | both
    #[arg(long)]
    precision: Option<String>,
    /// Largest acceptable relative error.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Comma-separated NAL weights.
    #[arg(long)]
    w_nal: Option<List<f64>>,
    #[arg(long)]
    modes: Option<List<Named<NegativeMode>>>,
    #[arg(long)]
    losses: Option<List<Named<NalLossType>>>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Serve(a) => commands::serve(a),
        Cmd::Bench(a) => commands::bench(a),
        Cmd::GradCheck(a) => commands::grad_check(a),
        Cmd::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
