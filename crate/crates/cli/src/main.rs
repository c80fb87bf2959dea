mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lightsleep::adapt::AdaptMode;
use lightsleep::complexity::FlopConvention;
use lightsleep::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "lightsleep", version, about = "Single-channel EEG sleep staging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenSynth(GenSynthArgs),
    /// Cut one EDF recording into labeled 30 s epochs.
    IngestEdf(IngestArgs),
    /// Train a model on a labeled dataset.
    Train(TrainArgs),
    /// Replace BN statistics with statistics of unlabeled target data.
    Adapt(AdaptArgs),
    /// Score a checkpoint, or run subject-wise cross-validation.
    Eval(EvalArgs),
    /// Per-layer parameter and FLOP table.
    Analyze(AnalyzeArgs),
    /// Cost table for 1..=N residual blocks.
    SweepBlocks(SweepArgs),
    /// Histogram of gradient norms before and after reweighting.
    ExportGradHist(GradHistArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    epochs_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated amplitude scale per subject, or a single value for all.
    #[arg(long, value_delimiter = ',')]
    shift_scales: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    edf: PathBuf,
    #[arg(long)]
    hypnogram: PathBuf,
    #[arg(long, default_value = "EEG Fpz-Cz")]
    channel: String,
    /// Defaults to the EDF file stem.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, default_value_t = 0)]
    night: u8,
    /// Keep at most this many wake epochs before and after sleep.
    #[arg(long)]
    trim_wake: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct RunConfigArgs {
    /// Run configuration JSON with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model configuration JSON; replaces the run config's model section.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    reweight: Option<OnOff>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunConfigArgs,
    /// Also write a checkpoint every k epochs (suffixed with the epoch).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Training log CSV; a JSON copy is written alongside.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "sequential")]
    mode: AdaptMode,
    #[arg(long, default_value_t = 40)]
    batch: usize,
    /// Per-layer statistic changes; defaults to stats-delta.json next to --out.
    #[arg(long)]
    deltas: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "kfold")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Subject-wise k-fold cross-validation with a fresh model per fold.
    #[arg(long, requires = "train_cfg")]
    kfold: Option<usize>,
    /// Run configuration used to train each fold.
    #[arg(long)]
    train_cfg: Option<PathBuf>,
    /// Adapt BN statistics to each evaluated set before scoring.
    #[arg(long)]
    adabn: Option<AdaptMode>,
    #[arg(long, default_value_t = 40)]
    batch: usize,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "mac")]
    flop_convention: FlopConvention,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_blocks: usize,
    #[arg(long, default_value = "mac")]
    flop_convention: FlopConvention,
    /// With --test-data, train each depth on this set and report accuracy.
    #[arg(long, requires = "test_data")]
    train_data: Option<PathBuf>,
    #[arg(long, requires = "train_data")]
    test_data: Option<PathBuf>,
    #[arg(long)]
    train_cfg: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradHistArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 40)]
    batch: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn report_error(kind: &str, code: u8, message: &str) -> ExitCode {
    let body = serde_json::json!({
        "error": { "kind": kind, "exit_code": code, "message": message }
    });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error("usage", 2, e.to_string().trim()),
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
            };
            report_error(name, exit_code(kind), &e.to_string())
        }
    }
}
