//! `pkit`: generate toy networks, collect calibration statistics, compress
//! with rotations and run the equivalence experiments.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a
//! numerical check fails or a solve is flagged.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pkit", version, about = "Rotation-aided structured compression of toy networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random toy network.
    GenNet(GenNetArgs),
    /// Run calibration sequences through a network and store correlations.
    Calibrate(CalibrateArgs),
    /// Rotate and compress a network according to a job config.
    Compress(CompressArgs),
    /// Check that two networks (or a network and a random rotation of it)
    /// produce the same logits.
    VerifyInvariance(VerifyArgs),
    /// Direct versus rotated projection on planted weights, as CSV.
    CompareRotated(CompareRotatedArgs),
    /// Slicing closed form versus the generic block-zero optimizer.
    SliceEquiv(SliceEquivArgs),
    /// Summarize the report of a compression run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenNetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Activation width of every block.
    #[arg(long, default_value_t = 16)]
    inner: usize,
    /// Number of (attention, relu) block pairs.
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    #[arg(long)]
    no_biases: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Newline-separated token ids, cut into sequences of `--len`.
    #[arg(long, conflicts_with = "batches")]
    tokens: Option<PathBuf>,
    /// Directory of `.pkt` matrices whose rows are token sequences.
    #[arg(long)]
    batches: Option<PathBuf>,
    /// Random sequences to draw when no input is given.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Calibration directory from `calibrate`; random sequences otherwise.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Worker threads for the per-position solves (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Cap the iteration budgets for quick runs.
    #[arg(long)]
    fast: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    holdout: usize,
    #[arg(long, default_value_t = 16)]
    len: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    net: PathBuf,
    /// Network to compare against; a random rotation of `--net` if absent.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 12)]
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Class {
    Kron,
    Gs,
    Blockzero,
}

#[derive(Debug, Args)]
struct CompareRotatedArgs {
    #[arg(long, value_enum, default_value_t = Class::Kron)]
    class: Class,
    /// Fraction of parameters removed.
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SliceEquivArgs {
    /// Columns kept by the slicing.
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// JSON destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of a `compress` run.
    #[arg(long)]
    out: PathBuf,
    /// Re-emit the report as canonical JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("PKIT_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenNet(a) => commands::gen_net(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Compress(a) => commands::compress(&a),
        Command::VerifyInvariance(a) => commands::verify_invariance(&a),
        Command::CompareRotated(a) => commands::compare_rotated(&a),
        Command::SliceEquiv(a) => commands::slice_equiv(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Flagged(msg)) => {
            eprintln!("pkit: {}", msg);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("pkit: {:#}", e);
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
