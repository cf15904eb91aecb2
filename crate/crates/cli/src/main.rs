use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmtc_core::GmtcError;
use serde::Serialize;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "gmtc", version, about = "Gaussian-mixture transform coding experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Draw train/test datasets and the ground-truth dictionary.
    Synth(SynthArgs),
    /// Fit a mixture by EM and write its transform dictionary.
    Fit(FitArgs),
    /// Theoretical RD curves of a dictionary.
    Bounds(BoundsArgs),
    /// Code a dataset into a GMTB stream.
    Encode(EncodeArgs),
    /// Reconstruct a dataset from a GMTB stream.
    Decode(DecodeArgs),
    /// Code and reconstruct a dataset, reporting rate and NMSE.
    Eval(EvalArgs),
    /// Coded RD curves for several schemes.
    RdSweep(SweepArgs),
    /// Scalar-count and operation-count audit of a dictionary.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Complex,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Law {
    /// Shared DFT basis with log-uniform spectra.
    Dft,
    /// Multipath regimes on a uniform array over subcarriers.
    Geometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Kmeans,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Dictionary with MAP-selected labels.
    Map,
    /// Dictionary with labels read from --labels.
    OracleLabel,
    /// Single-covariance transform coding.
    Tc,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Complex)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 80_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n_test: usize,
    #[arg(long, value_enum, default_value_t = Law::Dft)]
    pub law: Law,
    /// Antennas for the geometry law; subcarriers are dim / n_tx.
    #[arg(long, default_value_t = 8)]
    pub n_tx: usize,
    #[arg(long, default_value_t = 6)]
    pub paths: usize,
    /// Maximum path delay in subcarrier-spacing units.
    #[arg(long, default_value_t = 4.0)]
    pub max_delay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub reg: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Kmeans)]
    pub init: InitArg,
    #[arg(long)]
    pub segment: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the parameter audit and check the scalar-count formula.
    #[arg(long)]
    pub audit: bool,
    /// Optional JSON file for the log-likelihood trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GridArgs {
    /// `rate:r1,r2,..`, `distortion:d1,..` or `mu:m1,..`; rates include label bits.
    #[arg(long, default_value = "rate:0.25,0.5,1,1.5,2")]
    pub grid: String,
    #[arg(long, default_value_t = 1)]
    pub tau: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BoundsArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; a CSV mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Single target, same syntax as --grid.
    #[arg(long, default_value = "rate:1")]
    pub target: String,
    #[arg(long, default_value_t = 1)]
    pub tau: usize,
    /// Use these labels instead of MAP selection.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Also write the decoded labels.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Rewrite --data through the CSIBIN reader and writer without coding.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, required_unless_present = "identity")]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub segment: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    /// Dictionary for the map and oracle-label schemes.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Test data to code.
    #[arg(long)]
    pub data: PathBuf,
    /// Training data for the tc baseline and --fit-k.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "map")]
    pub baselines: Vec<Scheme>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Fit one dictionary per K on --train and add a MAP curve for each.
    #[arg(long, value_delimiter = ',')]
    pub fit_k: Vec<usize>,
    #[arg(long)]
    pub segment: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AuditArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &GmtcError) -> u8 {
    match e {
        GmtcError::InvariantViolation(_) => 4,
        GmtcError::InvalidArgument(_) | GmtcError::IndivisibleBlock { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var("GMTC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GMTC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let result = match &cli.verb {
        Verb::Synth(a) => commands::synth(a),
        Verb::Fit(a) => commands::fit(a),
        Verb::Bounds(a) => commands::bounds(a),
        Verb::Encode(a) => commands::encode(a),
        Verb::Decode(a) => commands::decode(a),
        Verb::Eval(a) => commands::eval(a),
        Verb::RdSweep(a) => commands::rd_sweep(a),
        Verb::Audit(a) => commands::audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
