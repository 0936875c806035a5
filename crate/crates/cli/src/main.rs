//! `quark`: drive the train → prune → quantize → compile → simulate workflow
//! from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure (violations,
//! oracle mismatches), 3 runtime error.
//! Set `QUARK_LOG` (e.g. `QUARK_LOG=debug`) for log output on stderr.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnn_dataplane::flow::FeatureProfile;

#[derive(Debug, Parser)]
#[command(name = "quark", version, about = "Compile small 1D CNNs into match-action pipeline programs")]
pub struct Cli {
    /// Print a single JSON object instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic packet trace and its feature dataset.
    GenData(GenDataArgs),
    /// Train a float model on a feature dataset.
    Train(TrainArgs),
    /// Prune channels by weight magnitude, then fine-tune.
    Prune(PruneArgs),
    /// Convert a trained model to integer parameters.
    Quantize(QuantizeArgs),
    /// Lower a quantized model to a pipeline program.
    Compile(CompileArgs),
    /// Check a program against the pipeline restrictions.
    Validate(ProgramArg),
    /// Run one input through the pipeline simulator.
    Simulate(SimulateArgs),
    /// Classify every flow of a packet trace on the simulator.
    Classify(ClassifyArgs),
    /// Print the resource report of a compiled program.
    Report(ProgramArg),
    /// Run one input through the integer reference pass.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 150)]
    pub flows_per_class: usize,
    /// Packets per flow before inference.
    #[arg(short = 'n', long, default_value_t = 8)]
    pub packets: usize,
    #[arg(long, value_enum, default_value = "sequence")]
    pub profile: Profile,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes trace.csv, labels.csv and dataset.csv here.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Profile {
    Sequence,
    Extended,
}

impl From<Profile> for FeatureProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Sequence => FeatureProfile::Sequence,
            Profile::Extended => FeatureProfile::Extended,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Raw feature dataset (CSV, columns f0..,label).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Every k-th sample is held out, k = round(1 / fraction).
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fine-tune with fake quantization at this bit-width.
    #[arg(long)]
    pub qat_bits: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Conv output channels, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 16, 16])]
    pub conv: Vec<usize>,
    /// FC output widths, comma separated; the last is the class count.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 15])]
    pub fc: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub rate: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub bits: u32,
    /// Report float/integer agreement on this dataset's held-out split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub stages: usize,
    /// CAP-Units per pipeline pass.
    #[arg(short = 'p', long = "units-per-pass", default_value_t = 1)]
    pub units_per_pass: usize,
    #[arg(long, default_value_t = cnn_dataplane::compiler::DEFAULT_TABLE_CAP)]
    pub table_cap: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProgramArg {
    #[arg(long)]
    pub program: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// JSON `{"codes": [...]}` or `{"raw": [...]}`.
    #[arg(long)]
    pub features: PathBuf,
    /// Include per-pass stage snapshots and table accesses.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub program: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Cross-check every inference against this quantized model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 8)]
    pub packets: usize,
    #[arg(long, value_enum, default_value = "sequence")]
    pub profile: Profile,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long, default_value_t = 1 << 16)]
    pub capacity: usize,
    #[arg(long, default_value_t = 60_000_000)]
    pub iat_limit_us: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: cnn_dataplane::Error },
    #[error(transparent)]
    Runtime(#[from] cnn_dataplane::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::File { .. } | Failure::Runtime(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUARK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(out) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", out.render(cli.json));
            if out.failed {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
