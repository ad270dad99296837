use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actmon::abstraction::Mode;
use actmon::experiment::{plan_network, run_experiment, ExperimentPlan, ExperimentReport};
use actmon::io::write_atomic;
use actmon::monitor::{verdicts_to_csv, verdicts_to_jsonl, FittedAbstraction, MonitorArtifact};
use actmon::perturb::{Perturbation, PerturbationSpec};
use actmon::refnet::Network;
use actmon::report::write_report;
use actmon::trace::{
    load_trace, save_trace, ActivationVector, TraceDataset, TraceFormat, TraceRecord,
};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const THREADS_ENV: &str = "ACTMON_THREADS";

/// Runtime out-of-distribution monitor for activation traces.
#[derive(Parser, Debug)]
#[command(name = "actmon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit per-neuron Gaussian statistics on a proper training trace file.
    Fit(FitArgs),
    /// Calibrate a fitted abstraction into a monitor artifact.
    Calibrate(CalibrateArgs),
    /// Score traces with a monitor and write one verdict per sample.
    Check(CheckArgs),
    /// Apply a perturbation to every image in a trace file.
    Perturb(PerturbArgs),
    /// Run the synthetic detection experiment.
    Experiment(ExperimentArgs),
    /// Render an experiment report as CSV tables and optional SVG charts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::ClassAgnostic)]
    mode: ModeArg,
    #[arg(long, default_value_t = 2.0, value_parser = positive_f64)]
    k: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    abstraction: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = unit_f64)]
    tau: f64,
    /// Free-form name of the monitored layer, stored in the artifact.
    #[arg(long, default_value = "")]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Emit::Jsonl)]
    emit: Emit,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_parser = non_negative_f64)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Network JSON; required for fgsm.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Plan JSON; the built-in configuration when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the network the experiment traced.
    #[arg(long)]
    network_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    experiment: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    svg: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    ClassAgnostic,
    PerClass,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClassAgnostic => Mode::ClassAgnostic,
            ModeArg::PerClass => Mode::PerClass,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Emit {
    Jsonl,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Gaussian,
    Impulse,
    Fgsm,
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be greater than 0"))
    }
}

fn non_negative_f64(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must not be negative"))
    }
}

fn unit_f64(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

/// A misuse detected after argument parsing; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    if inputs.iter().any(|i| same_file(out, i)) {
        return Err(usage(format!(
            "output {} would overwrite an input file",
            out.display()
        )));
    }
    Ok(())
}

fn read_traces(path: &Path) -> Result<TraceDataset> {
    load_trace(path, TraceFormat::from_path(path))
        .with_context(|| format!("reading traces from {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn fit(args: FitArgs) -> Result<()> {
    guard_output(&args.out, &[&args.traces])?;
    let traces = read_traces(&args.traces)?;
    let mode = Mode::from(args.mode);
    let fitted = FittedAbstraction::fit(&traces, mode, args.k).with_context(|| {
        format!(
            "fitting {} samples from {}",
            traces.len(),
            args.traces.display()
        )
    })?;
    fitted.save(&args.out)?;
    println!("neurons: {}", fitted.abstraction.n_neurons());
    println!("samples: {}", traces.len());
    println!("mode: {mode}");
    if let Some(classes) = fitted.abstraction.class_stats() {
        let names: Vec<String> = classes.keys().map(u32::to_string).collect();
        println!("classes: {} ({})", classes.len(), names.join(", "));
    }
    println!("k = {:?}", args.k);
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    guard_output(&args.out, &[&args.abstraction, &args.traces])?;
    let fitted = FittedAbstraction::from_json(&read_text(&args.abstraction)?)
        .with_context(|| format!("parsing {}", args.abstraction.display()))?;
    let traces = read_traces(&args.traces)?;
    let monitor = fitted.calibrate(&traces, args.tau, args.layer)?;
    monitor.save(&args.out)?;
    println!("calibration samples: {}", monitor.calibration().len());
    println!("tau = {:?}", args.tau);
    Ok(())
}

fn check(args: CheckArgs) -> Result<()> {
    guard_output(&args.out, &[&args.monitor, &args.traces])?;
    let monitor = MonitorArtifact::from_json(&read_text(&args.monitor)?)
        .with_context(|| format!("parsing monitor {}", args.monitor.display()))?;
    let traces = read_traces(&args.traces)?;
    let batch = monitor.check_batch(&traces).with_context(|| {
        format!(
            "checking {} against {}",
            args.traces.display(),
            args.monitor.display()
        )
    })?;
    let body = match args.emit {
        Emit::Jsonl => verdicts_to_jsonl(&batch.verdicts)?,
        Emit::Csv => verdicts_to_csv(&batch.verdicts)?,
    };
    write_atomic(&args.out, body.as_bytes())?;
    println!("ID: {}, OOD: {}", batch.summary.id, batch.summary.ood);
    Ok(())
}

fn perturb(args: PerturbArgs) -> Result<()> {
    let mut inputs = vec![args.input.as_path()];
    if let Some(n) = &args.network {
        inputs.push(n);
    }
    guard_output(&args.output, &inputs)?;
    let perturbation = match args.kind {
        KindArg::Gaussian => Perturbation::Gaussian {
            variance: args.level,
        },
        KindArg::Impulse => Perturbation::Impulse { p: args.level },
        KindArg::Fgsm => Perturbation::Fgsm {
            epsilon: args.level,
        },
    };
    perturbation.validate().map_err(|e| usage(e.to_string()))?;
    let network = match (&args.network, args.kind) {
        (Some(p), _) => Some(
            Network::from_json(&read_text(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        (None, KindArg::Fgsm) => return Err(usage("--network is required for fgsm")),
        (None, _) => None,
    };
    let images = read_traces(&args.input)?;
    if let Some(net) = &network {
        let expected = net.input_shape().numel();
        if expected != images.n_neurons() {
            anyhow::bail!(
                "network expects {expected} input values but {} has {} per record",
                args.input.display(),
                images.n_neurons()
            );
        }
    }
    let spec = PerturbationSpec::new(perturbation, args.seed);
    let records = images
        .records()
        .par_iter()
        .map(|r| {
            let x: Vec<f64> = r.activations.iter().map(|&v| f64::from(v)).collect();
            let y = spec.apply(network.as_ref(), &x, r.sample_id)?;
            Ok(TraceRecord::new(
                r.sample_id,
                ActivationVector::from_f64(&y)?,
                r.label,
            ))
        })
        .collect::<actmon::Result<Vec<_>>>()?;
    let out = TraceDataset::new(images.n_neurons(), records)?;
    save_trace(&out, &args.output, TraceFormat::from_path(&args.output))?;
    println!(
        "perturbed {} samples with {}",
        out.len(),
        perturbation.label()
    );
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let plan = match &args.plan {
        Some(p) => {
            guard_output(&args.out, &[p])?;
            serde_json::from_str::<ExperimentPlan>(&read_text(p)?)
                .with_context(|| format!("parsing plan {}", p.display()))?
        }
        None => ExperimentPlan::default(),
    };
    let report = run_experiment(&plan)?;
    write_atomic(&args.out, report.to_json()?.as_bytes())?;
    if let Some(path) = &args.network_out {
        plan_network(&plan)?.save(path)?;
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    let width = report
        .conditions
        .iter()
        .map(|c| c.key().len())
        .max()
        .unwrap_or(0);
    for c in &report.conditions {
        println!(
            "{:width$}  ID: {:>4}, OOD: {:>4}  mean p {:.4}",
            c.key(),
            c.id_count,
            c.ood_count,
            c.mean_p
        );
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let report = ExperimentReport::from_json(&read_text(&args.experiment)?)
        .with_context(|| format!("parsing report {}", args.experiment.display()))?;
    let files = write_report(&report, &args.out_dir, args.svg)?;
    println!("wrote {} files to {}", files.len(), args.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Check(a) => check(a),
        Command::Perturb(a) => perturb(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
