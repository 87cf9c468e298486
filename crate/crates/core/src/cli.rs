//! `railguard` command line.
//!
//! Exit codes: 0 success, 1 runtime error, 2 invalid arguments or config,
//! 3 a failed `verify` check. Inputs are validated before any output file
//! is created.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bench::{
    describe, evaluate_run, measure_latency, read_predictions, write_bench_csv, BenchSummary,
    PredictionFrame,
};
use crate::clock::MonotonicClock;
use crate::pipeline::{run_pipeline, PipelineConfig, RunError, SafetyPipeline, Sinks};
use crate::scenario::{
    builtin_scenario, builtin_scenarios, encode_scenario, GroundTruthFile, ScenarioSpec,
};
use crate::tensor_io::{write_tensor_stream, InferenceBackend, PlaybackBackend};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Runtime = 1,
    Invalid = 2,
    VerifyFailed = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} acceptance check(s) failed")]
    VerifyFailed(usize),
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Invalid(_) => ExitStatus::Invalid,
            CliError::Runtime(_) => ExitStatus::Runtime,
            CliError::VerifyFailed(_) => ExitStatus::VerifyFailed,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "railguard",
    version,
    about = "Train-platform safety monitor and edge benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a tensor stream and ground truth from a scenario.
    Simulate(SimulateArgs),
    /// Run the safety pipeline over a tensor stream.
    Run(RunArgs),
    /// Measure end-to-end latency and efficiency.
    Bench(BenchArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the built-in acceptance checks.
    Verify,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub out_tensors: PathBuf,
    #[arg(long)]
    pub out_gt: PathBuf,
    /// Also write the matching station pipeline config.
    #[arg(long)]
    pub out_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub tensors: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub alerts_out: PathBuf,
    #[arg(long)]
    pub results_out: PathBuf,
    #[arg(long)]
    pub transitions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub tensors: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Board power draw in watts.
    #[arg(long, allow_negative_numbers = true)]
    pub power_w: f64,
    /// Leading frames excluded from the statistics.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Summary JSON destination; standard output when omitted.
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
    /// Ground truth used to score accuracy from the benchmarked detections.
    #[arg(long, conflicts_with = "accuracy_pct")]
    pub gt: Option<PathBuf>,
    /// Accuracy in percent quoted from elsewhere.
    #[arg(long, allow_negative_numbers = true)]
    pub accuracy_pct: Option<f64>,
    /// Latency quoted from elsewhere, used for efficiency instead of the measured mean.
    #[arg(long, allow_negative_numbers = true)]
    pub latency_ms: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Playback delay per frame, standing in for accelerator inference time.
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
    #[arg(long, default_value_t = 1)]
    pub loops: u32,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Detection or result JSON Lines.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 0)]
    pub class_id: u32,
}

/// Parses `args` (including the program name) and runs the command. Data
/// goes to `out`; diagnostics go to `err`.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() {
                ExitStatus::Invalid
            } else {
                ExitStatus::Success
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.status()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(&a, out),
        Command::Run(a) => run(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Evaluate(a) => evaluate(&a, out),
        Command::Verify => verify_all(out),
    }
}

fn resolve_scenario(arg: &str) -> Result<ScenarioSpec, CliError> {
    if let Some(spec) = builtin_scenario(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        let names: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
        return Err(invalid(format!(
            "unknown scenario '{arg}' (built-in: {})",
            names.join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = resolve_scenario(&a.scenario)?;
    let config = PipelineConfig::station();
    let (header, frames, gt) = encode_scenario(&spec, &config.decode).map_err(invalid)?;
    let gt_file = GroundTruthFile {
        scenario: spec.name.clone(),
        image_width: spec.image_width,
        image_height: spec.image_height,
        frames: gt,
    };
    let objects: usize = gt_file.frames.iter().map(|f| f.objects.len()).sum();
    write_tensor_stream(&a.out_tensors, &header, &frames).map_err(runtime)?;
    let bytes = fs::metadata(&a.out_tensors).map_err(runtime)?.len();
    let mut gt_json = serde_json::to_string_pretty(&gt_file).map_err(runtime)?;
    gt_json.push('\n');
    write_file(&a.out_gt, gt_json.as_bytes())?;
    if let Some(p) = &a.out_config {
        write_file(p, (config.to_json_pretty() + "\n").as_bytes())?;
    }
    log::info!("wrote {bytes} bytes to {}", a.out_tensors.display());
    writeln!(
        out,
        "{}",
        serde_json::json!({
            "scenario": spec.name,
            "frames": frames.len(),
            "objects": objects,
            "tensor_bytes": bytes,
        })
    )
    .map_err(runtime)
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    PipelineConfig::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn open_stream(path: &Path, loops: u32, delay: Duration) -> Result<PlaybackBackend, CliError> {
    PlaybackBackend::open(path, loops, delay)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn run(a: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(&a.config)?;
    let mut backend = open_stream(&a.tensors, 1, Duration::ZERO)?;
    config.check_stream(backend.header()).map_err(invalid)?;
    let mut pipeline = SafetyPipeline::new(config).map_err(invalid)?;

    let mut alerts = create(&a.alerts_out)?;
    let mut results = create(&a.results_out)?;
    let mut transitions = a.transitions_out.as_deref().map(create).transpose()?;
    let mut sinks = Sinks {
        alerts: Some(&mut alerts),
        results: Some(&mut results),
        transitions: transitions.as_mut().map(|w| w as &mut dyn Write),
    };
    let summary = run_pipeline(&mut backend, &mut pipeline, &mut sinks).map_err(|e| match e {
        RunError::Config(c) => invalid(c),
        RunError::Sink { .. } => runtime(e),
    })?;
    writeln!(out, "{}", serde_json::to_string(&summary).map_err(runtime)?).map_err(runtime)
}

fn read_gt(path: &Path) -> Result<GroundTruthFile, CliError> {
    let file = File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn check_iou(iou: f64) -> Result<(), CliError> {
    if iou > 0.0 && iou <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("--iou {iou} must be in (0, 1]")))
    }
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(a.power_w > 0.0) {
        return Err(invalid(format!("--power-w {} must be positive", a.power_w)));
    }
    if let Some(p) = a.accuracy_pct {
        if !(0.0..=100.0).contains(&p) {
            return Err(invalid(format!("--accuracy-pct {p} must be in [0, 100]")));
        }
    }
    if let Some(l) = a.latency_ms {
        if !(l > 0.0) {
            return Err(invalid(format!("--latency-ms {l} must be positive")));
        }
    }
    if a.loops == 0 {
        return Err(invalid("--loops must be positive"));
    }
    check_iou(a.iou)?;
    let config = load_config(&a.config)?;
    let mut backend = open_stream(&a.tensors, a.loops, Duration::from_millis(a.delay_ms))?;
    config.check_stream(backend.header()).map_err(invalid)?;
    let total = backend.header().frame_count as usize * a.loops as usize;
    if a.warmup >= total {
        return Err(invalid(format!(
            "insufficient samples: warmup {} >= {total} frames",
            a.warmup
        )));
    }
    let gt = a.gt.as_deref().map(read_gt).transpose()?;
    let class_id = config.decode.person_class_id;
    let mut pipeline = SafetyPipeline::new(config).map_err(invalid)?;

    let run = measure_latency(
        &mut backend,
        &mut pipeline,
        a.warmup,
        &mut MonotonicClock::new(),
    )
    .map_err(runtime)?;
    log::info!("{}", describe(&run.stats));
    let (accuracy, precision, recall) = match (&gt, a.accuracy_pct) {
        (Some(gt), _) => {
            // only the first pass of a looped stream lines up with the ground truth
            let first: Vec<PredictionFrame> = run
                .predictions
                .iter()
                .filter(|p| (p.frame as usize) < gt.frames.len())
                .cloned()
                .collect();
            let r = evaluate_run(&first, &gt.frames, a.iou, class_id).map_err(runtime)?;
            (Some(r.accuracy), Some(r.precision), Some(r.recall))
        }
        (None, Some(p)) => (Some(p / 100.0), None, None),
        (None, None) => (None, None, None),
    };
    let mut summary =
        BenchSummary::new(accuracy, precision, recall, run.stats, a.power_w).map_err(invalid)?;
    if let Some(l) = a.latency_ms {
        summary = summary.with_reported_latency(l).map_err(invalid)?;
    }

    let mut csv = create(&a.out_csv)?;
    write_bench_csv(&mut csv, &run.records)
        .and_then(|_| csv.flush())
        .map_err(|e| runtime(format!("{}: {e}", a.out_csv.display())))?;
    let json = summary.to_json_pretty() + "\n";
    match &a.summary_out {
        Some(p) => write_file(p, json.as_bytes()),
        None => out.write_all(json.as_bytes()).map_err(runtime),
    }
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_iou(a.iou)?;
    let gt = read_gt(&a.gt)?;
    let file = File::open(&a.pred).map_err(|e| runtime(format!("{}: {e}", a.pred.display())))?;
    let pred = read_predictions(BufReader::new(file))
        .map_err(|e| runtime(format!("{}: {e}", a.pred.display())))?;
    let result = evaluate_run(&pred, &gt.frames, a.iou, a.class_id).map_err(runtime)?;
    writeln!(out, "{}", serde_json::to_string(&result).map_err(runtime)?).map_err(runtime)
}

fn verify_all(out: &mut dyn Write) -> Result<(), CliError> {
    let reports = verify::run_all();
    for r in &reports {
        writeln!(out, "{r}").map_err(runtime)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(())
}

/// Entry point for the binary: real process arguments and standard streams.
pub fn main_status() -> ExitStatus {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    run_from_args(std::env::args_os(), &mut out, &mut err)
}
