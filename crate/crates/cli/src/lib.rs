//! Command implementations for the `privinfer` binary.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 when a
//! two-party session aborts.

pub mod reports;
mod session;

use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use privinfer::circuit::ReluVariant;
use privinfer::faultmodel::FaultMode;
use privinfer::field::{FieldError, FieldParams, DEFAULT_PRIME};
use privinfer::nn::{
    load_model, parse_arch, random_model, save_dataset, save_model, synthetic_dataset,
    ModelGenOptions, NnError, StochasticReluConfig,
};
use privinfer::protocol::{
    offline_phase, save_dealer_file, ProtocolError, RescalePolicy, SessionConfig, TrustedDealer,
};
use thiserror::Error;

pub use reports::{bench_gc, sweep, validate_faults};
pub use session::run_party;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("protocol aborted: {0}")]
    Abort(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Abort(_) => 3,
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        if e.is_abort() {
            CliError::Abort(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(format!("csv: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "privinfer",
    version,
    about = "Two-party private inference with garbled-circuit ReLUs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded random model from an architecture string.
    GenModel(GenModelArgs),
    /// Generate inputs labelled by a model's own plaintext predictions.
    GenDataset(GenDatasetArgs),
    /// Precompute offline material for one inference into a dealer file.
    Deal(DealArgs),
    /// Garbled-circuit size for every ReLU variant.
    BenchGc(BenchGcArgs),
    /// Compare analytic fault probabilities with enumeration or sampling.
    ValidateFaults(ValidateFaultsArgs),
    /// Run one party of a private inference over TCP.
    Run(RunArgs),
    /// Fault rate and accuracy across truncation widths (cleartext simulator).
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Comma-separated layers, e.g. `input:1x8x8,conv:4x3:p1,relu,avgpool:2,flatten,fc:10`.
    #[arg(long)]
    pub layers: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Fractional bits of weights and activations.
    #[arg(long, default_value_t = 8)]
    pub frac_bits: u32,
    /// Draw integer weights uniformly from `(-2^b, 2^b)` instead.
    #[arg(long)]
    pub weight_bits: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_PRIME)]
    pub prime: u64,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Session parameters both parties must agree on.
#[derive(Debug, Clone, Args)]
pub struct SessionArgs {
    #[arg(long, default_value = "sign-stoch")]
    pub variant: ReluVariant,
    /// Truncated low bits (sign-stoch only).
    #[arg(long, default_value_t = 0)]
    pub k: u32,
    #[arg(long, default_value = "poszero")]
    pub mode: FaultMode,
    #[arg(long, default_value = "local")]
    pub rescale: RescalePolicy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SessionArgs {
    pub fn config(&self, params: FieldParams) -> SessionConfig {
        let relu = StochasticReluConfig {
            k: self.k,
            mode: self.mode,
            seed: self.seed,
        };
        let mut cfg = SessionConfig::new(params, self.variant, relu, self.seed);
        cfg.rescale = self.rescale;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct DealArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub session: SessionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchGcArgs {
    /// Field width in bits.
    #[arg(long, default_value_t = 31)]
    pub m: u32,
    /// Truncation widths for sign-stoch, inclusive range `a..b` or a single value.
    #[arg(long, default_value = "0..24")]
    pub k: String,
    #[arg(long, default_value = "poszero")]
    pub mode: FaultMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Poszero,
    Negpass,
    Both,
}

impl ModeChoice {
    pub fn modes(self) -> Vec<FaultMode> {
        match self {
            ModeChoice::Poszero => vec![FaultMode::PosZero],
            ModeChoice::Negpass => vec![FaultMode::NegPass],
            ModeChoice::Both => FaultMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateFaultsArgs {
    #[arg(long, default_value_t = DEFAULT_PRIME)]
    pub p: u64,
    #[arg(long, default_value_t = 0)]
    pub k: u32,
    #[arg(long, value_enum, default_value_t = ModeChoice::Both)]
    pub mode: ModeChoice,
    /// Enumerate every mask instead of sampling (small primes only).
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Explicit comma-separated x values; default is an evenly spaced grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Vec<i64>,
    /// Grid size when `--x` is not given.
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Server,
    Client,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    /// Model directory (server).
    #[arg(long, required_if_eq("role", "server"))]
    pub model: Option<PathBuf>,
    /// Quantized input as raw little-endian i64 values (client).
    #[arg(long, required_if_eq("role", "client"))]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to listen on or connect to; the server accepts 0 and reports the bound port.
    #[arg(long, default_value_t = 7700)]
    pub port: u16,
    #[command(flatten)]
    pub session: SessionArgs,
    /// Field prime (client; the server takes it from the model).
    #[arg(long, default_value_t = DEFAULT_PRIME)]
    pub prime: u64,
    /// Offline material from `deal`; consumed (deleted) once loaded.
    #[arg(long)]
    pub dealer_file: Option<PathBuf>,
    /// Seconds the client keeps retrying the connection.
    #[arg(long, default_value_t = 30)]
    pub connect_timeout: u64,
    /// Exit abruptly after sending this many online frames (fault injection).
    #[arg(long, hide = true)]
    pub fail_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Inclusive range `a..b`.
    #[arg(long, default_value = "0..20")]
    pub k_range: String,
    #[arg(long, value_enum, default_value_t = ModeChoice::Both)]
    pub mode: ModeChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `a..b` (inclusive) or a single number.
pub fn parse_range(s: &str) -> Result<RangeInclusive<u32>, CliError> {
    let bad = || CliError::Usage(format!("bad range `{s}` (expected a..b)"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

/// Opens `path` for writing, or stdout.
pub(crate) fn output<'a>(
    path: &Option<PathBuf>,
    stdout: &'a mut dyn Write,
) -> Result<Box<dyn Write + 'a>, CliError> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            std::fs::File::create(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(stdout),
    })
}

pub fn gen_model(a: &GenModelArgs) -> Result<(), CliError> {
    let spec = parse_arch(&a.layers)?;
    let params = FieldParams::new(a.prime)?;
    let opts = ModelGenOptions {
        frac_bits: a.frac_bits,
        weight_bits: a.weight_bits,
    };
    let model = random_model(&spec, &opts, params, a.seed)?;
    save_model(&model, &a.out)?;
    Ok(())
}

pub fn gen_dataset(a: &GenDatasetArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let ds = synthetic_dataset(&model, a.n, a.seed)?;
    save_dataset(&ds, &a.out)?;
    Ok(())
}

pub fn deal(a: &DealArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let cfg = a.session.config(model.params);
    let (c, s) = offline_phase(&model, &cfg, &mut TrustedDealer::new(cfg.dealer_seed))?;
    save_dealer_file(&a.out, &cfg, &c, &s)?;
    Ok(())
}

/// Runs a parsed command line.
pub fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::GenModel(a) => gen_model(&a),
        Command::GenDataset(a) => gen_dataset(&a),
        Command::Deal(a) => deal(&a),
        Command::BenchGc(a) => bench_gc(&a, stdout),
        Command::ValidateFaults(a) => validate_faults(&a, stdout),
        Command::Run(a) => run_party(&a, stdout, stderr),
        Command::Sweep(a) => sweep(&a, stdout, stderr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0..24").unwrap(), 0..=24);
        assert_eq!(parse_range("3..=5").unwrap(), 3..=5);
        assert_eq!(parse_range("7").unwrap(), 7..=7);
        for bad in ["5..2", "a..b", "", "1..", "-1..3"] {
            assert!(parse_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Abort("x".into()).exit_code(), 3);
        assert_eq!(CliError::from(ProtocolError::ConfigMismatch).exit_code(), 3);
        assert_eq!(
            CliError::from(ProtocolError::Config("x".into())).exit_code(),
            2
        );
    }

    #[test]
    fn command_line_parses() {
        let cli = Cli::try_parse_from([
            "privinfer",
            "run",
            "--role",
            "client",
            "--input",
            "x.bin",
            "--variant",
            "relu-full",
            "--k",
            "3",
        ])
        .unwrap();
        let Command::Run(r) = cli.command else {
            panic!()
        };
        assert_eq!(r.session.variant, ReluVariant::ReluFull);
        assert!(Cli::try_parse_from(["privinfer", "run", "--role", "server"]).is_err());
        let cli = Cli::try_parse_from([
            "privinfer",
            "validate-faults",
            "--x",
            "-3,0,5",
            "--mode",
            "negpass",
        ])
        .unwrap();
        let Command::ValidateFaults(v) = cli.command else {
            panic!()
        };
        assert_eq!(v.x, vec![-3, 0, 5]);
        assert_eq!(v.mode.modes(), vec![FaultMode::NegPass]);
    }
}
