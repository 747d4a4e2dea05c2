//! Command-line front end: launch/resume training runs, recompute
//! metrics from checkpoints, emit the theory curve, run the numeric
//! verification suite, and render plots.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error,
//! 3 verification failure.

use clap::{Args, Parser, Subcommand};
use groklab::error::GrokError;
use groklab::plot::{render_plot, PlotSpec};
use groklab::runlog::{MetricRecord, RunLogWriter};
use groklab::theory::{predicted_accuracy, TheoryParams};
use groklab::train::{
    dataset_accuracy, dataset_loss, evaluate_record, load_task_data, restore_state, run_training,
    TrainConfig,
};
use groklab::verify::run_all_checks;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "groklab", about = "grokking laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training run from a TOML config.
    Train(TrainArgs),
    /// Recompute metrics offline from a checkpoint.
    Metrics(MetricsArgs),
    /// Emit the predicted-accuracy curve as CSV.
    TheoryCurve(TheoryArgs),
    /// Run the randomized inequality verification suite.
    Verify(VerifyArgs),
    /// Render an SVG chart from run logs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Run directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// TOML experiment config describing the architecture and metrics.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Standalone JSONL log to append the record to.
    #[arg(long, default_value = "metrics.jsonl")]
    out: PathBuf,
    /// Override the perturbation σ for perturb-based metrics.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0.5)]
    l: f64,
    #[arg(long, default_value_t = 0.01)]
    mu: f64,
    #[arg(long, default_value_t = 1925.0)]
    a: f64,
    #[arg(long, default_value_t = 500.0)]
    b: f64,
    /// Last step of the curve.
    #[arg(long, default_value_t = 15000)]
    steps: u64,
    /// Number of log-spaced grid points.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Run log(s); repeat the flag to overlay runs.
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    /// Metric name(s) to draw; repeat the flag for multiple series.
    #[arg(long = "series", required = true)]
    series: Vec<String>,
    /// Linear step axis (default is log-scale).
    #[arg(long)]
    linear_x: bool,
    #[arg(long, default_value = "")]
    title: String,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Metrics(args) => cmd_metrics(&args),
        Command::TheoryCurve(args) => cmd_theory(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Plot(args) => cmd_plot(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

impl From<GrokError> for CliError {
    fn from(e: GrokError) -> Self {
        let code = match e {
            GrokError::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

/// Parse + resolve a config file; unknown keys are named exactly in the
/// error. Relative MNIST paths are resolved against GROKLAB_DATA_DIR.
fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Ok(root) = std::env::var("GROKLAB_DATA_DIR") {
        let root = PathBuf::from(root);
        for slot in [&mut cfg.mnist.images, &mut cfg.mnist.labels] {
            if let Some(p) = slot {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// One writer per run directory: `run.lock` is created exclusively and
/// removed when the guard drops (including on error paths).
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("run.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError {
                code: EXIT_RUNTIME,
                message: format!(
                    "run directory is locked by another writer ({} exists)",
                    path.display()
                ),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out)?;
    let _lock = LockGuard::acquire(&args.out)?;
    let resolved = toml::to_string_pretty(&cfg)
        .map_err(|e| usage(format!("config re-serialization: {e}")))?;
    std::fs::write(args.out.join("config.toml"), resolved)?;
    run_training(&cfg, &args.out, args.resume)?;
    println!("run complete: {}", args.out.display());
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(sigma) = args.sigma {
        if sigma < 0.0 {
            return Err(usage("--sigma must be >= 0"));
        }
        cfg.metrics.perturb_err_sigma = Some(sigma);
        cfg.metrics.info_sigma = Some(sigma);
    }
    let (model, _state, step, _acc) = restore_state(&args.checkpoint, &cfg)?;
    let data = load_task_data(&cfg)?;
    let train_acc = dataset_accuracy(&model, &data.train.view())?;
    let train_loss = dataset_loss(&model, &data.train.view())?;
    let test_acc = dataset_accuracy(&model, &data.test.view())?;
    let record: MetricRecord =
        evaluate_record(&cfg, &model, &data, step, train_loss, train_acc, test_acc)?;
    let mut writer = if args.out.exists() {
        RunLogWriter::append_to(&args.out)?
    } else {
        RunLogWriter::create(&args.out)?
    };
    writer.append(&record)?;
    println!("step {step} metrics appended to {}", args.out.display());
    Ok(())
}

fn cmd_theory(args: &TheoryArgs) -> Result<(), CliError> {
    let params = TheoryParams {
        l: args.l,
        mu: args.mu,
        a: args.a,
        b: args.b,
        steps: args.steps,
    };
    params.validate()?;
    if args.points < 2 {
        return Err(usage("--points must be >= 2"));
    }
    // Log-spaced grid from 1 to steps inclusive, deduplicated.
    let top = (args.steps as f64).log10();
    let mut grid: Vec<u64> = (0..args.points)
        .map(|i| {
            let exp = top * i as f64 / (args.points - 1) as f64;
            (10f64.powf(exp)).round() as u64
        })
        .collect();
    grid.dedup();
    *grid.last_mut().expect("points >= 2") = args.steps;

    let mut csv = String::from("step,predicted_accuracy\n");
    for step in grid {
        let acc = predicted_accuracy(step, &params)?;
        csv.push_str(&format!("{step},{acc}\n"));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let reports = run_all_checks(args.seed)?;
    let mut failed = false;
    for r in &reports {
        println!(
            "{}: trials={} violations={} max_slack={:.3e}{}",
            r.check,
            r.trials,
            r.violations,
            r.max_slack,
            if r.passed() {
                String::new()
            } else {
                format!(" worst={}", r.worst_case)
            }
        );
        failed |= !r.passed();
    }
    if failed {
        return Err(CliError {
            code: EXIT_VERIFY,
            message: "verification suite reported violations".into(),
        });
    }
    println!("all checks passed");
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let spec = PlotSpec {
        logs: args.logs.clone(),
        series: args.series.clone(),
        log_x: !args.linear_x,
        title: args.title.clone(),
        output: args.out.clone(),
    };
    render_plot(&spec)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
