//! `oaat`: train, evaluate, attack and analyse oracle-aligned adversarial
//! training runs.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error, 3 invalid
//! configuration, 4 numeric failure.

mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oaat::training::Variant;

use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "oaat", version, about = "Oracle-aligned adversarial training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root under which run directories are created.
    #[arg(long, global = true, env = "OAAT_RUN_ROOT", default_value = "runs")]
    pub out: PathBuf,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing checkpoints and per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the configured attack ensemble.
    Eval(EvalArgs),
    /// Perturb the test split with the configured attack.
    Attack(AttackArgs),
    /// Closed-form vs Monte-Carlo values on the synthetic linear task.
    Theory(TheoryArgs),
    /// Per-image contrast scores and bin assignments.
    Contrast(ContrastArgs),
    /// Masking and contrast series from an evaluation report, as CSV.
    Plotdata(PlotdataArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// `oaat`, `pgd_at`, `trades` or `awp_trades`; defaults to `oaat`.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Continue the run with this id from its latest checkpoint.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<String>,
    /// Stop after this epoch, leaving the run resumable.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
}

/// Where to find a trained model.
#[derive(Args, Debug)]
pub struct ModelSource {
    /// Use the latest checkpoint of this run, and its config by default.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<String>,
    #[arg(long, required_unless_present = "run")]
    pub checkpoint: Option<PathBuf>,
    /// Config whose data, eval and attack sections apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Baseline checkpoint for the contrast-binned comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub source: ModelSource,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    /// Attack radius; defaults to `2·alpha`.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Monte-Carlo sample size.
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    /// Standard accuracy slack for the robust-accuracy bound row.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct ContrastArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Number of bins; defaults to `eval.contrast_bins`.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Pool the variance over channels instead of averaging per channel.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Args, Debug)]
pub struct PlotdataArgs {
    /// `report.json` written by `eval`.
    #[arg(long)]
    pub report: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: oaat::Error| e.to_string())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if cli.global.device != "cpu" {
        return Err(CliError::Usage(format!(
            "device {:?} is not available; only cpu is supported",
            cli.global.device
        )));
    }
    let g = &cli.global;
    match (&cli.command, g.precision) {
        (Command::Train(a), Precision::F32) => commands::train::<f32>(g, a),
        (Command::Train(a), Precision::F64) => commands::train::<f64>(g, a),
        (Command::Eval(a), Precision::F32) => commands::eval::<f32>(g, a),
        (Command::Eval(a), Precision::F64) => commands::eval::<f64>(g, a),
        (Command::Attack(a), Precision::F32) => commands::attack::<f32>(g, a),
        (Command::Attack(a), Precision::F64) => commands::attack::<f64>(g, a),
        (Command::Theory(a), _) => commands::theory(g, a),
        (Command::Contrast(a), _) => commands::contrast(g, a),
        (Command::Plotdata(a), _) => commands::plotdata(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(run::LogTee)))
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
