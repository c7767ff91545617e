//! Command-line interface. [`run`] parses arguments, dispatches to the
//! library and returns the process exit code: 0 on success, 1 on a runtime
//! failure, 2 on a usage or configuration error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diagnostics::jacobian_suite;
use crate::error::Error;
use crate::eval::{ape, depth_metrics, pooled_depth_metrics, AlignMode};
use crate::io;
use crate::pipeline::{run_on_scenario, AblationSet, FrameMetrics, MetricsReport, PipelineConfig, PipelineMode};
use crate::simulator::{Scenario, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "basis-slam", version, about = "Multi-basis depth backend: simulate, optimize, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Simulate(SimulateArgs),
    /// Run the backend on a scenario directory.
    Run(RunArgs),
    /// Compare predicted depths and trajectory against ground truth.
    Eval(EvalArgs),
    /// Merge the metrics of several runs into one table.
    Report(ReportArgs),
    /// Check analytic factor Jacobians against finite differences.
    JacobianCheck(JacobianArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config (JSON: `scene` and optional `noise`).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// vins or orb.
    #[arg(long, default_value = "vins")]
    pub mode: PipelineMode,
    /// Comma-separated subset of b,c,full,m; empty for the baseline.
    #[arg(long, default_value = "b,c,full")]
    pub ablation: AblationSet,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Pipeline config (JSON); `--mode` and `--ablation` override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Align {
    Sim3,
    Se3,
    None,
}

impl From<Align> for AlignMode {
    fn from(a: Align) -> Self {
        match a {
            Align::Sim3 => AlignMode::Sim3,
            Align::Se3 => AlignMode::Se3,
            Align::None => AlignMode::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Align::Sim3)]
    pub align: Align,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run output directories or metrics.json files.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JacobianArgs {
    /// Random valid configurations per factor type.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a, out),
        Command::Run(a) => run_pipeline(&a, out),
        Command::Eval(a) => evaluate(&a, out),
        Command::Report(a) => report(&a, out),
        Command::JacobianCheck(a) => jacobian_check(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn read_config<V: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<V, Failure> {
    io::read_json(path).map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } => Failure::usage(format!("invalid config: {e}")),
        e => e.into(),
    })
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> CliResult {
    let mut config: ScenarioConfig = read_config(&a.config)?;
    if let Some(s) = a.seed {
        config.scene.seed = s;
    }
    config.scene.validate()?;
    config.noise.validate()?;
    let sc = Scenario::generate(&config)?;
    io::save_scenario(&a.out, &sc)?;
    let _ = writeln!(out, "wrote {} keyframes to {}", sc.frames.len(), a.out.display());
    Ok(EXIT_OK)
}

fn thread_pool(threads: usize) -> std::result::Result<rayon::ThreadPool, Failure> {
    if threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure { code: EXIT_FAILURE, message: e.to_string() })
}

fn run_pipeline(a: &RunArgs, out: &mut dyn Write) -> CliResult {
    let mut config = match &a.config {
        Some(p) => read_config::<PipelineConfig>(p)?,
        None => PipelineConfig::default(),
    };
    config.mode = a.mode;
    config.ablation = a.ablation;
    config.solver.threads = a.threads;
    config.validate()?;
    let pool = thread_pool(a.threads)?;
    let scenario = io::load_scenario(&a.scenario)?;
    let (record, metrics) = pool.install(|| run_on_scenario(&scenario, &config))?;
    io::save_run(&a.out, &record, &metrics)?;
    let m = &metrics.aggregate;
    let _ = writeln!(
        out,
        "{} {} {}: depth rmse {:.4} m, delta1 {:.2}%, ape {:.4} m",
        metrics.scenario,
        metrics.mode,
        config.ablation.label(),
        m.rmse,
        m.delta1,
        m.ape
    );
    if metrics.healthy {
        Ok(EXIT_OK)
    } else {
        Err(Failure { code: EXIT_FAILURE, message: "a solve diverged".into() })
    }
}

/// Output of the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: EvalAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub rmse: f64,
    pub delta1: f64,
    pub ape: f64,
}

fn keyset<V>(m: &BTreeMap<usize, V>) -> BTreeSet<usize> {
    m.keys().copied().collect()
}

fn missing(label: &str, have: &BTreeSet<usize>, want: &BTreeSet<usize>) -> Option<String> {
    let m: Vec<String> = want.difference(have).map(|i| i.to_string()).collect();
    (!m.is_empty()).then(|| format!("missing from {label}: {}", m.join(", ")))
}

/// Compares a prediction directory with a ground-truth directory.
pub fn eval_dirs(pred: &Path, gt: &Path, align: AlignMode) -> crate::Result<EvalReport> {
    let p = io::load_depth_set(pred)?;
    let g = io::load_depth_set(gt)?;
    let (pd, gd) = (keyset(&p.depths), keyset(&g.depths));
    let (pp, gp) = (keyset(&p.poses), keyset(&g.poses));
    let problems: Vec<String> = [
        missing("predicted depths", &pd, &gd),
        missing("ground-truth depths", &gd, &pd),
        missing("predicted trajectory", &pp, &gp),
        missing("ground-truth trajectory", &gp, &pp),
    ]
    .into_iter()
    .flatten()
    .collect();
    if !problems.is_empty() {
        return Err(Error::DimensionMismatch(format!("keyframe ids differ: {}", problems.join("; "))));
    }
    if pd.is_empty() {
        return Err(Error::DimensionMismatch(format!("no depth maps in {}", pred.display())));
    }
    let mut per_frame = Vec::new();
    let mut pairs = Vec::new();
    for (id, d) in &p.depths {
        let gtd = &g.depths[id];
        let m = depth_metrics(d, gtd, None)?;
        per_frame.push(FrameMetrics { id: *id, rmse: m.rmse, delta1: m.delta1, valid_pixel_count: m.valid_pixel_count });
        pairs.push((d, gtd));
    }
    let pooled = pooled_depth_metrics(&pairs, None)?;
    let est: Vec<_> = p.poses.into_iter().collect();
    let reference: Vec<_> = g.poses.into_iter().collect();
    let t = ape(&est, &reference, align)?;
    Ok(EvalReport {
        per_frame,
        aggregate: EvalAggregate { rmse: pooled.rmse, delta1: pooled.delta1, ape: t.ape_rmse },
    })
}

fn evaluate(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let r = eval_dirs(&a.pred, &a.gt, a.align.into())?;
    let text = io::to_json(&r)?;
    if let Some(p) = &a.out {
        io::write_atomic(p, text.as_bytes())?;
    }
    let _ = write!(out, "{text}");
    Ok(EXIT_OK)
}

/// One row of the comparison table: `D` is the depth RMSE and `T` the
/// trajectory APE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub mode: String,
    pub cell: String,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub delta1: f64,
}

pub const REPORT_CSV_HEADER: &str = "scenario,mode,cell,D,T,delta1";

pub fn report_rows(inputs: &[PathBuf]) -> crate::Result<Vec<ReportRow>> {
    inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("metrics.json") } else { p.clone() };
            let m: MetricsReport = io::read_json(&file)?;
            let cell = m
                .ablation
                .parse::<AblationSet>()
                .map(|a| a.label())
                .map_err(|e| Error::Format { path: file.display().to_string(), message: e.to_string() })?;
            Ok(ReportRow {
                scenario: m.scenario,
                mode: m.mode,
                cell,
                d: m.aggregate.rmse,
                t: m.aggregate.ape,
                delta1: m.aggregate.delta1,
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn format_report(rows: &[ReportRow], format: Format) -> crate::Result<String> {
    match format {
        Format::Json => io::to_json(&rows),
        Format::Csv => {
            let mut s = format!("{REPORT_CSV_HEADER}\n");
            for r in rows {
                s += &format!(
                    "{},{},{},{},{},{}\n",
                    csv_field(&r.scenario),
                    csv_field(&r.mode),
                    csv_field(&r.cell),
                    r.d,
                    r.t,
                    r.delta1
                );
            }
            Ok(s)
        }
    }
}

fn report(a: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let text = format_report(&report_rows(&a.inputs)?, a.format)?;
    if let Some(p) = &a.out {
        io::write_atomic(p, text.as_bytes())?;
    }
    let _ = write!(out, "{text}");
    Ok(EXIT_OK)
}

fn jacobian_check(a: &JacobianArgs, out: &mut dyn Write) -> CliResult {
    if a.configs == 0 {
        return Err(Failure::usage("--configs must be positive"));
    }
    let start = Instant::now();
    let checks = jacobian_suite(a.configs, a.seed)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_error < a.tolerance;
        ok &= pass;
        let blocks: Vec<String> = c.blocks.iter().map(|b| format!("{} {:.3e}", b.block, b.max_rel_error)).collect();
        let _ = writeln!(
            out,
            "{:<16} {:>4} configs  max rel err {:.3e}  [{}]  {}",
            c.factor,
            c.configurations,
            c.max_rel_error,
            blocks.join(", "),
            if pass { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(out, "{:.2} s", start.elapsed().as_secs_f64());
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}
