//! Command-line driver.
//!
//! Every subcommand accepts `--config PATH`, a flat `key = value` file whose
//! keys are the subcommand's long flag names. Values from the file are applied
//! first and explicit flags override them. Exit codes: 0 on success, 1 for
//! runtime or data failures, 2 for usage and validation failures.

mod commands;

pub use commands::Range;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::error::Error;
use crate::plda::SelectionStrategy;
use crate::scoring::{EnrollPooling, KernelMode};

#[derive(Debug, Parser)]
#[command(name = "mosgplda", version, about = "Speaker verification backend with multi-objective sGPLDA training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic vectors (optionally a full verification benchmark)
    Gen(GenArgs),
    /// Train an sGPLDA backend
    Train(TrainArgs),
    /// Score trials with a trained model
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and labeled trials
    Eval(EvalArgs),
    /// Train and evaluate over a grid of alpha or rank values
    Sweep(SweepArgs),
    /// Split a trial list into progress and evaluation subsets
    Split(SplitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    So,
    Mo,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub speakers: usize,
    #[arg(long)]
    pub sessions: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training vectors output (.csv or .jsonl)
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth model output
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Number of confusable speaker clusters (benchmark mode)
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Spread of speaker factors around their cluster center (benchmark mode)
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_speakers: usize,
    #[arg(long, default_value_t = 5)]
    pub enroll_sessions: usize,
    #[arg(long, default_value_t = 3)]
    pub test_sessions: usize,
    #[arg(long)]
    pub enroll_out: Option<PathBuf>,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub trials_out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOptions {
    #[arg(long, value_enum, default_value_t = Mode::So)]
    pub mode: Mode,
    /// Speaker-space rank; required except under `sweep --rank-range`
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 1.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long = "select", default_value_t = SelectionStrategy::Nearest)]
    pub selection: SelectionStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lda_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    pub variance_floor: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vectors: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Training log csv; defaults to the model path with `.log.csv` appended
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = KernelMode::BetweenQ)]
    pub kernel: KernelMode,
    #[arg(long, default_value_t = EnrollPooling::MeanRenorm)]
    pub pooling: EnrollPooling,
    /// Vectors of cohort speakers; enables symmetric score normalization
    #[arg(long)]
    pub snorm_cohort: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub cohort_size: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub det: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub fa_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub miss_weight: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training vectors
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Labeled trials used for evaluation at every grid point
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long, default_value_t = KernelMode::BetweenQ)]
    pub kernel: KernelMode,
    #[arg(long, default_value_t = EnrollPooling::MeanRenorm)]
    pub pooling: EnrollPooling,
    #[arg(long, default_value_t = 100.0)]
    pub fa_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub miss_weight: f64,
    /// `lo:hi:step`
    #[arg(long, conflicts_with = "rank_range")]
    pub alpha_range: Option<String>,
    /// `lo:hi:step`
    #[arg(long)]
    pub rank_range: Option<String>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SplitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub progress_out: PathBuf,
    #[arg(long)]
    pub eval_out: PathBuf,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(Error::InvalidConfig(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Runtime(Error::MissingIds(ids)) => {
                let shown: Vec<&str> = ids.iter().take(10).map(String::as_str).collect();
                let mut m = format!("{} unresolved ids: {}", ids.len(), shown.join(", "));
                if ids.len() > 10 {
                    m.push_str(&format!(" (and {} more)", ids.len() - 10));
                }
                m
            }
            CliError::Runtime(e) => e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub fn main_entry() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the driver on `args` (program name first) and returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
            } else {
                let _ = write!(out, "{rendered}");
            }
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Inserts `--key value` pairs from the `--config` file right after the
/// subcommand name, so that later explicit flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<Option<&str>> = args.iter().map(|a| a.to_str()).collect();
    let mut config_at = None;
    for (i, a) in strs.iter().enumerate().skip(2) {
        match a {
            Some("--config") => config_at = Some((i, 2, strs.get(i + 1).copied().flatten().map(str::to_owned))),
            Some(s) if s.starts_with("--config=") => config_at = Some((i, 1, Some(s["--config=".len()..].to_owned()))),
            _ => {}
        }
    }
    let Some((pos, width, path)) = config_at else {
        return Ok(args);
    };
    let path = path.ok_or_else(|| CliError::Usage("--config requires a path".into()))?;
    let sub_name = strs.get(1).copied().flatten().unwrap_or_default().to_owned();
    let root = Cli::command();
    let sub = root
        .find_subcommand(&sub_name)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {sub_name:?}")))?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Runtime(Error::io(&path, e)))?;

    let mut injected: Vec<OsString> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{path}:{}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| CliError::Usage(format!("{path}:{}: unknown config key {key:?}", n + 1)))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        } else {
            match value {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(CliError::Usage(format!("{path}:{}: {key} expects true or false", n + 1))),
            }
        }
    }

    let mut expanded = Vec::with_capacity(args.len() + injected.len());
    expanded.extend(args[..2].iter().cloned());
    expanded.extend(injected);
    for (i, a) in args.into_iter().enumerate().skip(2) {
        if i < pos || i >= pos + width {
            expanded.push(a);
        }
    }
    Ok(expanded)
}
