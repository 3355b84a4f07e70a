use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sts_core::flops::FlopsReport;
use sts_core::lds::{schedule_table, SkipSchedule};
use sts_core::trainer::{self, Mode};
use sts_core::vtc::{self, IndexSet, Strategy};
use sts_core::Stage;

use crate::{checkpoint, config, io, LabError};

/// Fine-tune steps averaged into the reported final loss.
pub const FINAL_LOSS_WINDOW: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "sts", version, about = "Sparse training scheme for toy multimodal models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run both training stages and write metrics, FLOPs and a checkpoint.
    Train(TrainArgs),
    /// Dump the layer-skip probability schedule as CSV.
    Schedule(ScheduleArgs),
    /// Print analytic FLOPs reports for all four modes.
    Flops(FlopsArgs),
    /// Select visual tokens from a token file.
    Compress(CompressArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; omitted sections use the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lds.alpha=0.7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Sts,
    VtcOnly,
    LdsOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Sts => Mode::Sts,
            ModeArg::VtcOnly => Mode::VtcOnly,
            ModeArg::LdsOnly => Mode::LdsOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "sts")]
    pub mode: ModeArg,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Record per-step wall time in `wall_ms` (makes metrics non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    /// Total steps E.
    #[arg(long)]
    pub steps: usize,
    /// Number of layers L.
    #[arg(long)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Uniform,
    Random,
    InstructionGuided,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Uniform => Strategy::Uniform,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::InstructionGuided => Strategy::InstructionGuided,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Retention fraction in (0, 1].
    #[arg(long)]
    pub p: f64,
    /// Visual tokens, one CSV row per token.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Text tokens for the instruction-guided strategy.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Schedule(a) => cmd_schedule(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Compress(a) => cmd_compress(&a),
    }
}

fn load_config(a: &ConfigArgs) -> Result<sts_core::TrainConfig, LabError> {
    let mut overrides = a.overrides.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let file = match &a.config {
        Some(path) => config::load(path, &overrides)?,
        None => config::parse("", &overrides)?,
    };
    file.to_train_config()
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), LabError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| LabError::Write { path: path.to_path_buf(), source }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|source| LabError::Write { path: "<stdout>".into(), source })
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), LabError> {
    let cfg = load_config(&a.config)?;
    let mode = Mode::from(a.mode);
    std::fs::create_dir_all(&a.out).map_err(|source| LabError::Write { path: a.out.clone(), source })?;
    let mut metrics = io::MetricsWriter::create(&a.out.join("metrics.jsonl"))?;
    let mut write_error = None;
    let start = Instant::now();
    let wall_clock = a.wall_clock;
    let outcome = trainer::run_with(&cfg, mode, |r| {
        if write_error.is_some() {
            return;
        }
        let result = if wall_clock {
            let mut timed = r.clone();
            timed.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            metrics.write(&timed)
        } else {
            metrics.write(r)
        };
        if let Err(e) = result {
            write_error = Some(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    metrics.finish()?;
    let outcome = outcome?;
    io::write_json(&a.out.join("flops.json"), &outcome.flops.reports())?;
    checkpoint::save(&a.out.join("checkpoint.bin"), &outcome.model)?;
    println!(
        "mode={} final_loss={:.4} flops_ratio={:.4}",
        mode.name(),
        outcome.final_loss(Stage::FineTune, FINAL_LOSS_WINDOW),
        outcome.flops.total().ratio
    );
    Ok(())
}

pub fn cmd_schedule(a: &ScheduleArgs) -> Result<(), LabError> {
    let s = SkipSchedule::new(a.alpha, a.epsilon, a.steps, a.layers).map_err(|e| LabError::Usage(e.to_string()))?;
    let rows = schedule_table(&s, a.stride).map_err(|e| LabError::Usage(e.to_string()))?;
    let mut buf = Vec::new();
    io::write_schedule(&mut buf, &rows).expect("writing to memory");
    emit(a.out.as_deref(), std::str::from_utf8(&buf).expect("csv is utf-8"))
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<(), LabError> {
    let cfg = load_config(&a.config)?;
    let mut reports: BTreeMap<&str, [FlopsReport; 3]> = BTreeMap::new();
    for mode in Mode::ALL {
        reports.insert(mode.name(), cfg.expected_flops(mode)?.reports());
    }
    let mut text = serde_json::to_string_pretty(&reports).expect("reports serialize");
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Serialize)]
struct Selection<'a> {
    strategy: &'a str,
    source_length: usize,
    indices: &'a [usize],
    retention: f64,
}

pub fn cmd_compress(a: &CompressArgs) -> Result<(), LabError> {
    let strategy = Strategy::from(a.strategy);
    if !(a.p > 0.0 && a.p <= 1.0) {
        return Err(LabError::Usage(format!("--p must lie in (0, 1], got {}", a.p)));
    }
    let tokens = io::read_tokens(&a.tokens)?;
    let n = tokens.dims()[0];
    let idx: IndexSet = match strategy {
        Strategy::Uniform => vtc::uniform_indices(n, a.p)?,
        Strategy::Random => vtc::random_indices(n, a.p, a.seed)?,
        Strategy::InstructionGuided => {
            let path =
                a.text.as_ref().ok_or_else(|| LabError::Usage("instruction-guided selection needs --text".into()))?;
            vtc::instruction_indices(&tokens, &io::read_tokens(path)?, a.p)?
        }
    };
    let out =
        Selection { strategy: strategy.name(), source_length: n, indices: idx.indices(), retention: idx.retention() };
    let mut text = serde_json::to_string_pretty(&out).expect("selection serializes");
    text.push('\n');
    emit(a.out.as_deref(), &text)
}
